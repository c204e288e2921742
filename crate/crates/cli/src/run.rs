//! Executes one [`RunConfig`]: every seed gets its own subdirectory with a
//! checkpoint, a log, a config echo and a completion marker.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use drawdet::datapipe::{
    coco, filter_small_faces, generate_synthetic_corpus, load_coco_annotations, write_coco_dataset,
    AnnotatedImage, Corpus, Source, SMALL_FACE_RATIO,
};
use drawdet::detector::{Checkpoint, Detector, DetectorParams};
use drawdet::eval::{aggregate_runs, evaluate, APReport, AggregateReport};
use drawdet::pipeline::{run_stage1, run_stage3, EpochRecord};
use drawdet::selfsup::{run_stage2, write_curve_log};
use drawdet::{Error, Klass, Result};
use log::info;

use crate::config::{DatasetSource, Role, RunConfig, StageKind};

pub const ECHO_FILE: &str = "config.echo.toml";
pub const DONE_FILE: &str = "done.json";
pub const REPORT_HEADER: &str = "seed,face_ap,body_ap,mean_ap";
pub const AGGREGATE_HEADER: &str = "n_runs,mean_ap,stddev";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Loads and resizes every dataset with `role`, in config order.
pub fn load_role(cfg: &RunConfig, role: Role, corpora: &mut BTreeMap<u64, Corpus>) -> Result<Vec<AnnotatedImage>> {
    let size = cfg.detector.input_size;
    let mut out = Vec::new();
    for ds in cfg.datasets(role) {
        let images = match &ds.source {
            DatasetSource::Coco { annotations, images, exclude_animals } => {
                let file = coco::read_coco_file(annotations)?;
                let bodies = drawdet::datapipe::animals_as_bodies(&file.categories, *exclude_animals);
                let source = if role == Role::Train && cfg.stage == Some(StageKind::Stage1) {
                    Source::Natural
                } else {
                    Source::Drawing
                };
                load_coco_annotations(annotations, images, &bodies, source)?
            }
            DatasetSource::Synthetic { split, seed } => {
                if !corpora.contains_key(seed) {
                    corpora.insert(*seed, generate_synthetic_corpus(&cfg.corpus, *seed)?);
                }
                let corpus = &corpora[seed];
                corpus
                    .splits()
                    .into_iter()
                    .find(|(name, _)| name == split)
                    .map(|(_, imgs)| imgs.to_vec())
                    .ok_or_else(|| Error::Config(format!("unknown synthetic split `{split}`")))?
            }
        };
        out.extend(images.into_iter().map(|img| {
            if img.image.width == size && img.image.height == size {
                img
            } else {
                img.resized(size)
            }
        }));
    }
    if role == Role::Train && cfg.stage == Some(StageKind::Stage1) {
        out = filter_small_faces(out, SMALL_FACE_RATIO);
    }
    Ok(out)
}

fn initial_params(cfg: &RunConfig, detector: &Detector, seed: u64) -> Result<DetectorParams> {
    match &cfg.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.detector {
                return Err(Error::Config(format!(
                    "init checkpoint {} was built for a different detector config",
                    path.display()
                )));
            }
            detector.check_params(&ckpt.params)?;
            Ok(ckpt.params)
        }
        None => Ok(detector.init_params(seed)),
    }
}

fn epoch_csv(log: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("epoch,mean_loss,dev_face_ap,dev_body_ap\n");
    for r in log {
        s += &format!("{},{},{},{}\n", r.epoch, r.mean_loss, opt(r.dev_face_ap), opt(r.dev_body_ap));
    }
    s
}

/// Result of one seed: the score used for reporting (test AP for `stage3`
/// and `eval`, best dev AP otherwise).
pub type SeedResult = Option<APReport>;

/// Runs the config for a single seed into `dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path, corpora: &mut BTreeMap<u64, Corpus>) -> Result<SeedResult> {
    mkdir(dir)?;
    let single = RunConfig { seeds: vec![seed], output_dir: Some(dir.to_path_buf()), ..cfg.clone() };
    write(&dir.join(ECHO_FILE), &single.to_toml()?)?;
    let detector = Detector::new(&cfg.detector)?;
    let stage = cfg.stage()?;
    let result = match stage {
        StageKind::Stage1 => {
            let train = load_role(cfg, Role::Train, corpora)?;
            let dev = load_role(cfg, Role::Dev, corpora)?;
            let mut tc = cfg.train_config();
            tc.style_bank = cfg.style_bank.build()?;
            let init = initial_params(cfg, &detector, seed)?;
            let out = run_stage1(&detector, &init, &train, &dev, &tc, seed)?;
            out.best.save(&dir.join("stage1.ckpt"))?;
            write(&dir.join("epochs.csv"), &epoch_csv(&out.log))?;
            out.best_dev
        }
        StageKind::Stage2 => {
            let unlabeled = load_role(cfg, Role::Unlabeled, corpora)?;
            let dev = load_role(cfg, Role::Dev, corpora)?;
            let init = initial_params(cfg, &detector, seed)?;
            let out = run_stage2(&detector, &init, &unlabeled, &dev, &cfg.selfsup_config(), seed)?;
            out.best.save(&dir.join("stage2.ckpt"))?;
            write_curve_log(&dir.join("curve.csv"), &out.curve)?;
            out.best_dev
        }
        StageKind::Stage3 => {
            let train = load_role(cfg, Role::Train, corpora)?;
            let dev = load_role(cfg, Role::Dev, corpora)?;
            let test = load_role(cfg, Role::Test, corpora)?;
            let init = initial_params(cfg, &detector, seed)?;
            let (out, report) =
                run_stage3(&detector, &init, &train, cfg.subset_n, &dev, &test, &cfg.train_config(), seed)?;
            out.best.save(&dir.join("stage3.ckpt"))?;
            write(&dir.join("epochs.csv"), &epoch_csv(&out.log))?;
            Some(report)
        }
        StageKind::Eval => {
            let test = load_role(cfg, Role::Test, corpora)?;
            let init = initial_params(cfg, &detector, seed)?;
            Some(evaluate(&detector, &init, &test, seed)?)
        }
        StageKind::GenSynthetic => {
            let corpus = generate_synthetic_corpus(&cfg.corpus, seed)?;
            for (name, split) in corpus.splits() {
                write_coco_dataset(&dir.join(name), "annotations.json", split, |_, _| "person".to_string())?;
            }
            None
        }
    };
    write(&dir.join(DONE_FILE), &serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub per_seed: Vec<(u64, SeedResult)>,
    pub aggregate: Option<AggregateReport>,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn read_done(dir: &Path) -> Result<Option<SeedResult>> {
    let path = dir.join(DONE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Runs every seed of `cfg` under `root`. With `resume`, seeds that already
/// have a completion marker are read back instead of rerun.
pub fn run_config(cfg: &RunConfig, root: &Path, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    mkdir(root)?;
    write(&root.join(ECHO_FILE), &cfg.to_toml()?)?;
    let mut corpora = BTreeMap::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(root, seed);
        let result = match resume.then(|| read_done(&dir)).transpose()?.flatten() {
            Some(done) => {
                info!("seed {seed}: already complete, skipping");
                done
            }
            None => {
                info!("{} seed {seed} -> {}", cfg.stage()?.name(), dir.display());
                run_seed(cfg, seed, &dir, &mut corpora)?
            }
        };
        per_seed.push((seed, result));
    }
    let reports: Vec<APReport> = per_seed.iter().filter_map(|(_, r)| r.clone()).collect();
    let aggregate = if reports.is_empty() {
        None
    } else {
        let mut table = String::from(REPORT_HEADER);
        table.push('\n');
        for (seed, r) in &per_seed {
            if let Some(r) = r {
                table += &format!("{seed},{},{},{}\n", r.per_class_ap[&Klass::Face], r.per_class_ap[&Klass::Body], r.mean_ap);
            }
        }
        write(&root.join("report.csv"), &table)?;
        let agg = aggregate_runs(&reports, None)?;
        write(&root.join("aggregate.csv"), &format!("{AGGREGATE_HEADER}\n{},{},{}\n", agg.n_runs, agg.mean, agg.stddev))?;
        Some(agg)
    };
    Ok(RunSummary { output_dir: root.to_path_buf(), per_seed, aggregate })
}
