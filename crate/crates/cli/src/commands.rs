use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;

use pixelseed::eval::{evaluate, gt_from_labels, Detection, EvalConfig, EvalReport, GtInstance};
use pixelseed::gradcheck::{run_grad_check, GradCheckConfig};
use pixelseed::proposer::{propose, read_proposals, write_proposals, MaskProposal, ProposerConfig};
use pixelseed::scene::{
    load_embedding, load_labels, load_scores, save_embedding, save_labels, save_tensor,
    EMBEDDING_FILE, IMAGE_FILE, LABELS_FILE,
};
use pixelseed::synth::{fit_embedding, generate_scene, oracle_scores, FitConfig, SceneSpec};
use pixelseed::{ClassScoreStack, EmbeddingField, InstanceLabelMap};

use crate::manifest::ManifestBuilder;
use crate::{
    Cli, Command, EvalOpts, EvaluateArgs, FitArgs, GradCheckArgs, ProposalOpts, ProposeArgs,
    SceneSelection, SweepArgs, SynthArgs,
};

pub const LOSS_TRACE_FILE: &str = "loss_trace.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "alpha_sweep.tsv";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";

/// Error raised for bad flag combinations or invalid configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Outcome::Success => ExitCode::SUCCESS,
            Outcome::CheckFailed => ExitCode::from(1),
        }
    }
}

pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(pixelseed::Error::Config(_)) = cause.downcast_ref::<pixelseed::Error>() {
            return 2;
        }
    }
    1
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let jobs = cli.jobs.map(usize::from);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cannot start worker pool")?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::FitEmbedding(a) => fit(cli, a),
        Command::Propose(a) => propose_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::SweepAlpha(a) => sweep(cli, a),
        Command::GradCheck(a) => grad_check(cli, a),
    })
}

fn jobs(cli: &Cli) -> Option<usize> {
    cli.jobs.map(usize::from)
}

// ---------------------------------------------------------------------------
// Scene selection
// ---------------------------------------------------------------------------

/// Relative paths that do not exist are retried under the output root.
fn resolve(cli: &Cli, path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        let alt = cli.out_root.join(path);
        if alt.exists() {
            return alt;
        }
    }
    path.to_path_buf()
}

fn scene_dirs(cli: &Cli, sel: &SceneSelection) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = sel.scenes.iter().map(|p| resolve(cli, p)).collect();
    if sel.root.is_some() || dirs.is_empty() {
        let root = match &sel.root {
            Some(r) => resolve(cli, r),
            None => cli.out_root.join("scenes"),
        };
        let entries =
            fs::read_dir(&root).with_context(|| format!("cannot read scene root {}", root.display()))?;
        let mut found = Vec::new();
        for entry in entries {
            let path = entry?.path();
            if path.join(LABELS_FILE).is_file() {
                found.push(path);
            }
        }
        if found.is_empty() {
            bail!("no scene directories with {LABELS_FILE} under {}", root.display());
        }
        found.sort();
        dirs.extend(found);
    }
    for d in &dirs {
        if !d.is_dir() {
            bail!("scene directory {} does not exist", d.display());
        }
    }
    Ok(dirs)
}

/// Manifest location for commands that write into scene directories.
fn manifest_dir(cli: &Cli, sel: &SceneSelection, dirs: &[PathBuf]) -> PathBuf {
    if let Some(r) = &sel.root {
        return resolve(cli, r);
    }
    if dirs.len() == 1 {
        return dirs[0].clone();
    }
    if sel.scenes.is_empty() {
        return cli.out_root.join("scenes");
    }
    dirs[0].parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_scene_labels(dir: &Path) -> Result<InstanceLabelMap> {
    load_labels(dir).with_context(|| format!("missing or unreadable labels in {}", dir.display()))
}

fn load_scene_embedding(dir: &Path) -> Result<EmbeddingField> {
    load_embedding(dir)
        .with_context(|| format!("missing or unreadable {}", dir.join(EMBEDDING_FILE).display()))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn synth(cli: &Cli, a: &SynthArgs) -> Result<Outcome> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            toml::from_str::<SceneSpec>(&text)
                .map_err(|e| UsageError(format!("invalid scene spec {}: {e}", path.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(n) = a.min_instances {
        spec.min_instances = n;
    }
    if let Some(n) = a.max_instances {
        spec.max_instances = n;
    }
    if let Some(c) = a.classes {
        spec.num_classes = c;
    }
    spec.validate()?;

    let out = a.out.clone().unwrap_or_else(|| cli.out_root.join("scenes"));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let width = a.scenes.saturating_sub(1).to_string().len().max(3);
    let seeds: Vec<u64> = (0..a.scenes).map(|i| a.seed.wrapping_add(i)).collect();
    let dirs: Vec<PathBuf> = (0..a.scenes).map(|i| out.join(format!("scene_{i:0width$}"))).collect();

    seeds.par_iter().zip(&dirs).try_for_each(|(&seed, dir)| -> Result<()> {
        let scene = generate_scene(&SceneSpec { seed, ..spec.clone() })?;
        save_labels(dir, &scene.labels)
            .with_context(|| format!("cannot write scene {}", dir.display()))?;
        save_tensor(&dir.join(IMAGE_FILE), &scene.image)?;
        Ok(())
    })?;

    let mut m = ManifestBuilder::new("synth", jobs(cli));
    m.config(json!({ "scenes": a.scenes, "spec": spec }));
    m.seeds(seeds);
    if let Some(p) = &a.spec {
        m.input(p);
    }
    for d in &dirs {
        m.output(d);
    }
    m.write(&out)?;
    println!("wrote {} scenes to {}", a.scenes, out.display());
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// fit-embedding
// ---------------------------------------------------------------------------

fn fit(cli: &Cli, a: &FitArgs) -> Result<Outcome> {
    let config = FitConfig {
        dim: a.dim,
        step_size: a.step,
        iterations: a.iters,
        k: a.k,
        seed: a.seed,
        init_scale: a.init_scale,
        background: a.background.into(),
        ..FitConfig::default()
    };
    config.validate()?;
    let dirs = scene_dirs(cli, &a.scenes)?;

    let finals: Vec<Option<f64>> = dirs
        .par_iter()
        .map(|dir| -> Result<Option<f64>> {
            let labels = load_scene_labels(dir)?;
            let result = fit_embedding(&labels, &config)
                .with_context(|| format!("fitting {}", dir.display()))?;
            save_embedding(dir, &result.field)?;
            let mut trace = String::from("step\tloss_e\n");
            for (i, l) in result.losses.iter().enumerate() {
                let _ = writeln!(trace, "{}\t{l}", i + 1);
            }
            fs::write(dir.join(LOSS_TRACE_FILE), trace)?;
            Ok(result.final_loss())
        })
        .collect::<Result<_>>()?;

    let mut m = ManifestBuilder::new("fit-embedding", jobs(cli));
    m.config(json!({
        "dim": config.dim,
        "step_size": config.step_size,
        "iterations": config.iterations,
        "k": config.k,
        "eps": config.eps,
        "init_scale": config.init_scale,
        "background": format!("{:?}", config.background).to_lowercase(),
    }));
    m.seeds([config.seed]);
    for d in &dirs {
        m.input(d.join(LABELS_FILE));
        m.output(d.join(EMBEDDING_FILE));
        m.output(d.join(LOSS_TRACE_FILE));
    }
    m.write(&manifest_dir(cli, &a.scenes, &dirs))?;
    for (d, f) in dirs.iter().zip(finals) {
        match f {
            Some(l) => println!("{}: final L_e {l:.6}", d.display()),
            None => println!("{}: no iterations, embedding left at initialization", d.display()),
        }
    }
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// propose
// ---------------------------------------------------------------------------

fn proposer_config(alpha: f64, opts: &ProposalOpts) -> ProposerConfig {
    let mut config = ProposerConfig {
        alpha,
        num_seeds: opts.num_seeds,
        tau_grow: opts.tau_grow.clone(),
        seediness_floor: opts.seediness_floor,
        ..ProposerConfig::default()
    };
    if let Some(t) = &opts.tau_cls {
        config.tau_cls = t.clone();
    }
    config
}

/// Scores for one scene: synthesized from the ground truth, or read from
/// `scores_<tau>.tnsr` files.
fn scene_scores(
    dir: &Path,
    field: &EmbeddingField,
    labels: Option<&InstanceLabelMap>,
    config: &ProposerConfig,
    opts: &ProposalOpts,
) -> Result<ClassScoreStack> {
    if opts.oracle_scores {
        let labels = labels.expect("labels are loaded for oracle scores");
        let classes = opts.classes.unwrap_or_else(|| labels.num_classes().max(1));
        return Ok(oracle_scores(
            field,
            labels,
            &config.tau_cls,
            classes,
            opts.oracle_iou,
            opts.oracle_eps,
        )?);
    }
    match load_scores(dir).with_context(|| format!("reading scores in {}", dir.display()))? {
        Some(s) => Ok(s),
        None => bail!(
            "no scores_<tau>.tnsr files in {}; provide class scores or pass --oracle-scores",
            dir.display()
        ),
    }
}

struct PreparedScene {
    field: EmbeddingField,
    scores: ClassScoreStack,
    config: ProposerConfig,
}

fn prepare(dir: &Path, alpha: f64, opts: &ProposalOpts) -> Result<PreparedScene> {
    let field = load_scene_embedding(dir)?;
    let labels = if opts.oracle_scores { Some(load_scene_labels(dir)?) } else { None };
    let mut config = proposer_config(alpha, opts);
    let scores = scene_scores(dir, &field, labels.as_ref(), &config, opts)?;
    if opts.tau_cls.is_none() {
        config.tau_cls = scores.thresholds().to_vec();
    }
    Ok(PreparedScene { field, scores, config })
}

fn propose_cmd(cli: &Cli, a: &ProposeArgs) -> Result<Outcome> {
    proposer_config(a.alpha, &a.opts).validate()?;
    let dirs = scene_dirs(cli, &a.scenes)?;
    let counts: Vec<usize> = dirs
        .par_iter()
        .map(|dir| -> Result<usize> {
            let p = prepare(dir, a.alpha, &a.opts)?;
            let proposals = propose(&p.field, &p.scores, &p.config)
                .with_context(|| format!("proposing in {}", dir.display()))?;
            let path = dir.join(&a.output);
            let mut w = BufWriter::new(
                File::create(&path).with_context(|| format!("cannot write {}", path.display()))?,
            );
            write_proposals(&mut w, &proposals)?;
            w.flush()?;
            Ok(proposals.len())
        })
        .collect::<Result<_>>()?;

    let config = proposer_config(a.alpha, &a.opts);
    let mut m = ManifestBuilder::new("propose", jobs(cli));
    m.config(json!({
        "alpha": config.alpha,
        "num_seeds": config.num_seeds,
        "tau_grow": config.tau_grow,
        "tau_cls": a.opts.tau_cls,
        "seediness_floor": config.seediness_floor,
        "oracle_scores": a.opts.oracle_scores,
        "oracle_eps": a.opts.oracle_eps,
        "oracle_iou": a.opts.oracle_iou,
        "classes": a.opts.classes,
    }));
    for d in &dirs {
        m.input(d.join(EMBEDDING_FILE));
        m.output(d.join(&a.output));
    }
    m.write(&manifest_dir(cli, &a.scenes, &dirs))?;
    for (d, n) in dirs.iter().zip(counts) {
        println!("{}: {n} proposals", d.display());
    }
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn eval_config(iou: &[f64], budgets: &[usize], exclude_difficult: bool) -> EvalConfig {
    EvalConfig {
        iou_thresholds: iou.to_vec(),
        budgets: budgets.to_vec(),
        include_difficult: !exclude_difficult,
        ..EvalConfig::default()
    }
}

fn read_scene_proposals(path: &Path) -> Result<Vec<MaskProposal>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_proposals(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<Outcome> {
    let EvalOpts { iou, budgets, exclude_difficult } = &a.eval;
    let config = eval_config(iou, budgets, *exclude_difficult);
    config.validate()?;
    let dirs = scene_dirs(cli, &a.scenes)?;

    let loaded: Vec<(Vec<GtInstance>, Vec<MaskProposal>)> = dirs
        .par_iter()
        .map(|dir| -> Result<_> {
            let gt = gt_from_labels(&load_scene_labels(dir)?);
            Ok((gt, read_scene_proposals(&dir.join(&a.proposals))?))
        })
        .collect::<Result<_>>()?;
    let mut gts = Vec::with_capacity(loaded.len());
    let mut dets = Vec::new();
    for (image, (gt, props)) in loaded.into_iter().enumerate() {
        gts.push(gt);
        dets.extend(props.iter().map(|p| Detection::from_proposal(image, p)));
    }
    let report = evaluate(&dets, &gts, &config)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    let out = a.out.clone().unwrap_or_else(|| cli.out_root.join("evaluate"));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let table = report.to_table();
    fs::write(out.join(REPORT_FILE), &table)?;
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary(&report, dirs.len()))? + "\n")?;

    let mut m = ManifestBuilder::new("evaluate", jobs(cli));
    m.config(serde_json::to_value(&config)?);
    for d in &dirs {
        m.input(d.join(LABELS_FILE));
        m.input(d.join(&a.proposals));
    }
    m.output(out.join(REPORT_FILE));
    m.output(out.join(SUMMARY_FILE));
    m.write(&out)?;
    print!("{table}");
    Ok(Outcome::Success)
}

fn summary(report: &EvalReport, scenes: usize) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = report
        .iou_thresholds
        .iter()
        .zip(&report.map)
        .map(|(b, m)| (format!("{b}"), json!(m)))
        .collect();
    json!({
        "scenes": scenes,
        "map": map,
        "report": report,
    })
}

// ---------------------------------------------------------------------------
// sweep-alpha
// ---------------------------------------------------------------------------

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<Outcome> {
    if a.alphas.is_empty() {
        return Err(UsageError("--alphas needs at least one value".into()).into());
    }
    for &alpha in &a.alphas {
        proposer_config(alpha, &a.opts).validate()?;
    }
    let config = eval_config(&a.iou, &[], false);
    config.validate()?;
    let dirs = scene_dirs(cli, &a.scenes)?;
    let labels: Vec<InstanceLabelMap> =
        dirs.par_iter().map(|d| load_scene_labels(d)).collect::<Result<_>>()?;
    let gts: Vec<Vec<GtInstance>> = labels.iter().map(gt_from_labels).collect();

    // Scores do not depend on alpha, so each scene is prepared once.
    let prepared: Vec<PreparedScene> =
        dirs.par_iter().map(|d| prepare(d, a.alphas[0], &a.opts)).collect::<Result<_>>()?;

    let mut rows: Vec<Vec<Option<f64>>> = Vec::with_capacity(a.alphas.len());
    for &alpha in &a.alphas {
        let per_scene: Vec<Vec<MaskProposal>> = prepared
            .par_iter()
            .map(|p| {
                let config = ProposerConfig { alpha, ..p.config.clone() };
                propose(&p.field, &p.scores, &config)
            })
            .collect::<pixelseed::Result<_>>()?;
        let dets: Vec<Detection> = per_scene
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |p| Detection::from_proposal(i, p)))
            .collect();
        rows.push(evaluate(&dets, &gts, &config)?.map);
    }

    let mut table = String::from("metric");
    for alpha in &a.alphas {
        let _ = write!(table, "\t{alpha}");
    }
    table.push('\n');
    for (bi, beta) in a.iou.iter().enumerate() {
        let _ = write!(table, "mAP^r@{beta}");
        for row in &rows {
            match row[bi] {
                Some(v) => {
                    let _ = write!(table, "\t{:.1}", 100.0 * v);
                }
                None => table.push_str("\t-"),
            }
        }
        table.push('\n');
    }

    let out = a.out.clone().unwrap_or_else(|| cli.out_root.join("sweep-alpha"));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join(SWEEP_FILE), &table)?;
    let mut m = ManifestBuilder::new("sweep-alpha", jobs(cli));
    m.config(json!({
        "alphas": a.alphas,
        "num_seeds": a.opts.num_seeds,
        "tau_grow": a.opts.tau_grow,
        "tau_cls": a.opts.tau_cls,
        "seediness_floor": a.opts.seediness_floor,
        "oracle_scores": a.opts.oracle_scores,
        "oracle_eps": a.opts.oracle_eps,
        "oracle_iou": a.opts.oracle_iou,
        "classes": a.opts.classes,
        "iou": a.iou,
    }));
    for d in &dirs {
        m.input(d);
    }
    m.output(out.join(SWEEP_FILE));
    m.write(&out)?;
    print!("{table}");
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

fn grad_check(cli: &Cli, a: &GradCheckArgs) -> Result<Outcome> {
    let config = GradCheckConfig {
        trials: a.trials as usize,
        seed: a.seed,
        rel_tol: a.rel_tol,
        perturb: if a.perturb_grad { 1e-2 } else { 0.0 },
        ..GradCheckConfig::default()
    };
    config.validate()?;
    let report = run_grad_check(&config)?;

    let out = a.out.clone().unwrap_or_else(|| cli.out_root.join("grad-check"));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join(GRAD_CHECK_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut m = ManifestBuilder::new("grad-check", jobs(cli));
    m.config(serde_json::to_value(&config)?);
    m.seeds([config.seed]);
    m.output(out.join(GRAD_CHECK_FILE));
    m.write(&out)?;

    for (name, s) in [("L_e", &report.embedding), ("L_cls", &report.classification)] {
        println!(
            "{name}: {} coordinates, {} failures, worst relative error {:.3e}",
            s.coordinates,
            s.failures,
            s.worst_rel_error()
        );
    }
    if report.passed() {
        println!("gradient check passed ({} trials)", report.trials);
        return Ok(Outcome::Success);
    }
    for s in [&report.embedding, &report.classification] {
        if let Some(c) = &s.first_failure {
            eprintln!("gradient mismatch: {c}");
        }
    }
    Ok(Outcome::CheckFailed)
}
