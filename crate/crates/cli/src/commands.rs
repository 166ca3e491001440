//! File-backed implementations of the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use endd::distill::{DistObjective, Trained};
use endd::eval::{
    auc_rr, curves_svg, manual_score, random_rejection_curve, read_annotations, rejection_curve,
    sentences_from_annotations, write_annotations, write_curve_csv, RankingMetric, RejectionCurve,
};
use endd::nnet::checkpoint;
use endd::uncertainty::Aggregate;

use crate::config::PipelineConfig;
use crate::pipeline::{
    annotation_stem, annotations, compute_metrics, corpus_rows, evaluate, generate_data,
    load_checkpoint, load_ensemble, member_checkpoint, read_split, read_vocab, student_checkpoint,
    train_ensemble, train_student, write_data, Metrics, Models, Student, System, TestSet,
    TEST_ID_FILE, TEST_OOD_FILE, TRAIN_FILE,
};
use crate::tables::{
    auc_rr_table, corpus_table, gleu_table, rejection_table, uncertainty_table, Table,
};

pub fn gen_data(cfg: &PipelineConfig) -> Result<Table> {
    cfg.validate()?;
    let dir = cfg.paths.data();
    let data = generate_data(cfg)?;
    write_data(&dir, &data)?;
    let table = corpus_table(&corpus_rows(&data));
    table.write(&dir, "corpora")?;
    cfg.dump(&dir)?;
    Ok(table)
}

fn log_history(label: &str, t: &Trained) {
    if let Some(last) = t.history.last() {
        log::info!("{label} finished: {last}");
    }
}

pub fn train_ensemble_cmd(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let train = read_split(&cfg.paths.data(), TRAIN_FILE)?;
    let dir = cfg.paths.checkpoints();
    let trained = train_ensemble(cfg, &train)?;
    let mut paths = Vec::new();
    for (i, t) in trained.iter().enumerate() {
        log_history(&format!("member {i}"), t);
        let path = member_checkpoint(&dir, i);
        checkpoint::save(&t.model, &path)?;
        paths.push(path);
    }
    cfg.dump(&dir)?;
    Ok(paths)
}

pub fn distill_cmd(cfg: &PipelineConfig, kind: Student) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.paths.checkpoints();
    let ensemble = load_ensemble(&dir, cfg.ensemble_size)
        .context("distillation needs the ensemble checkpoints")?;
    let train = read_split(&cfg.paths.data(), TRAIN_FILE)?;
    let t = train_student(cfg, &ensemble, &train, kind)?;
    log_history(kind.name(), &t);
    let path = student_checkpoint(&dir, kind);
    checkpoint::save(&t.model, &path)?;
    cfg.dump(&dir)?;
    Ok(path)
}

pub fn distill_dist_cmd(cfg: &PipelineConfig, objective: DistObjective) -> Result<PathBuf> {
    distill_cmd(cfg, Student::from_objective(objective))
}

fn load_models(cfg: &PipelineConfig, systems: &[System]) -> Result<Models> {
    let dir = cfg.paths.checkpoints();
    let needs = |s: &[System]| systems.iter().any(|x| s.contains(x));
    let mut models = Models::default();
    if needs(&[System::Ind, System::Ens]) {
        models.members = load_ensemble(&dir, cfg.ensemble_size)?;
    }
    if needs(&[System::Dist, System::Gua]) {
        models.dist = Some(load_checkpoint(&student_checkpoint(&dir, Student::Dist))?);
    }
    let gua_uq = Student::from_objective(cfg.eval.gua_uncertainty_model);
    if needs(&[System::Nll]) || (needs(&[System::Gua]) && gua_uq == Student::Nll) {
        models.nll = Some(load_checkpoint(&student_checkpoint(&dir, Student::Nll))?);
    }
    if needs(&[System::Kl]) || (needs(&[System::Gua]) && gua_uq == Student::Kl) {
        models.kl = Some(load_checkpoint(&student_checkpoint(&dir, Student::Kl))?);
    }
    Ok(models)
}

pub struct EvaluateOutput {
    pub metrics: Vec<Metrics>,
    pub tables: Vec<(&'static str, Table)>,
    pub annotation_files: Vec<PathBuf>,
}

/// Decodes every requested system on every requested test set, writes the
/// annotations and the four result tables.
pub fn evaluate_cmd(
    cfg: &PipelineConfig,
    systems: &[System],
    testsets: &[TestSet],
) -> Result<EvaluateOutput> {
    cfg.validate()?;
    if systems.is_empty() || testsets.is_empty() {
        bail!("at least one system and one test set are required");
    }
    let data_dir = cfg.paths.data();
    let vocab = read_vocab(&data_dir)?;
    let test_id = read_split(&data_dir, TEST_ID_FILE)?;
    let test_ood = read_split(&data_dir, TEST_OOD_FILE)?;
    let models = load_models(cfg, systems)?;
    let out_dir = cfg.paths.results();
    let ann_dir = out_dir.join("annotations");
    let mut metrics = Vec::new();
    let mut files = Vec::new();
    for &system in systems {
        // Decode each split once; the mix set reuses both.
        let id = evaluate(system, TestSet::Id, &models, &test_id, &test_ood, &cfg.eval)?;
        let ood = evaluate(
            system,
            TestSet::Ood,
            &models,
            &test_id,
            &test_ood,
            &cfg.eval,
        )?;
        let mix = crate::pipeline::Evaluation::mix(&id, &ood)?;
        for ev in [id, ood, mix] {
            if !testsets.contains(&ev.testset) {
                continue;
            }
            for (i, run) in ev.runs.iter().enumerate() {
                let path = ann_dir.join(format!("{}.jsonl", annotation_stem(&ev, i)));
                write_annotations(&path, &annotations(run, &vocab))?;
                files.push(path);
            }
            let m = compute_metrics(&ev, &cfg.eval)?;
            log::info!("{} on {}: gleu={:.4}", ev.system, ev.testset, m.gleu);
            metrics.push(m);
        }
    }
    let tables = vec![
        ("gleu", gleu_table(&metrics)),
        ("uncertainty", uncertainty_table(&metrics)),
        ("auc_rr", auc_rr_table(&metrics)),
        ("rejection", rejection_table(&metrics)),
    ];
    for (stem, t) in &tables {
        t.write(&out_dir, stem)?;
    }
    cfg.dump(&out_dir)?;
    Ok(EvaluateOutput {
        metrics,
        tables,
        annotation_files: files,
    })
}

pub struct CurveOutput {
    pub curve: RejectionCurve,
    pub auc_rr: f64,
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

pub fn reject_curve_cmd(
    annotations_file: &Path,
    metric: RankingMetric,
    aggregate: Aggregate,
    grid_step: f64,
    out_csv: &Path,
    svg: Option<&Path>,
) -> Result<CurveOutput> {
    let records = read_annotations(annotations_file)?;
    if records.is_empty() {
        bail!("annotations file {} is empty", annotations_file.display());
    }
    let sents = sentences_from_annotations(&records)?;
    let scores = metric.scores(&sents, aggregate)?;
    let curve = rejection_curve(&sents, &scores, grid_step)?;
    let manual: Vec<f64> = sents.iter().map(manual_score).collect();
    let manual_curve = rejection_curve(&sents, &manual, grid_step)?;
    let random = random_rejection_curve(&sents, grid_step)?;
    let rr = auc_rr(&curve, &manual_curve, random.auc)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_curve_csv(out_csv, &curve, Some(rr))?;
    let svg = match svg {
        Some(p) => {
            let body = curves_svg(&[
                (metric.name(), &curve),
                ("manual", &manual_curve),
                ("random", &random),
            ]);
            fs::write(p, body).with_context(|| format!("writing {}", p.display()))?;
            Some(p.to_path_buf())
        }
        None => None,
    };
    Ok(CurveOutput {
        curve,
        auc_rr: rr,
        csv: out_csv.to_path_buf(),
        svg,
    })
}
