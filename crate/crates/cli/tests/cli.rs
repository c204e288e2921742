use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drawdet::datapipe::Image;
use drawdet::detector::{postprocess, Checkpoint, Detector, DetectorConfig, HeadOutput, LevelOutput, Stage};
use drawdet::selfsup::{write_curve_log, CurveRecord};
use drawdet::Klass;
use drawdet_cli::render::{draw_detections, BODY_COLOR, FACE_COLOR};
use drawdet_cli::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};

fn drawdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drawdet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DRAWDET_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY_CORPUS: &str = r#"
[corpus]
natural_train = 12
drawing_unlabeled = 6
drawing_labeled_train = 10
drawing_dev = 4
drawing_test = 4
"#;

fn synth(role: &str, split: &str) -> String {
    format!("[[datasets]]\nrole = \"{role}\"\nkind = \"synthetic\"\nsplit = \"{split}\"\nseed = 3\n")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synthetic_writes_loadable_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gen.toml", &format!("stage = \"gen-synthetic\"\nseeds = [3]\n{TINY_CORPUS}"));
    ok(&drawdet(&["gen-synthetic", "--config", cfg.to_str().unwrap(), "--output-dir", "corpus"], tmp.path()));
    let split = tmp.path().join("corpus/seed-3/drawing_test");
    let file = drawdet::datapipe::coco::read_coco_file(&split.join("annotations.json")).unwrap();
    assert_eq!(file.images.len(), 4);
    assert!(split.join(&file.images[0].file_name).exists());
    assert!(tmp.path().join("corpus/config.echo.toml").exists());

    // The written files feed back in as a dataset.
    let eval_cfg = format!(
        "{TINY_CORPUS}[[datasets]]\nrole = \"test\"\nkind = \"coco\"\nannotations = \"{}\"\nimages = \"{}\"\n",
        split.join("annotations.json").display(),
        split.display()
    );
    let det = Detector::new(&DetectorConfig::desk()).unwrap();
    Checkpoint::new(Stage::Init, 0, DetectorConfig::desk(), det.init_params(0)).save(&tmp.path().join("init.ckpt")).unwrap();
    let cfg = write_config(tmp.path(), "eval.toml", &format!("init = \"init.ckpt\"\n{eval_cfg}"));
    ok(&drawdet(&["eval", "--config", cfg.to_str().unwrap(), "--output-dir", "ev"], tmp.path()));
    let report = fs::read_to_string(tmp.path().join("ev/report.csv")).unwrap();
    assert!(report.starts_with("seed,face_ap,body_ap,mean_ap\n0,"), "{report}");
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write_config(tmp.path(), "a.toml", "epochz = 3\n");
    assert_eq!(drawdet(&["stage1", "--config", bad_key.to_str().unwrap()], tmp.path()).status.code(), Some(EXIT_CONFIG));
    let wrong_stage = write_config(tmp.path(), "b.toml", "stage = \"stage2\"\n");
    assert_eq!(drawdet(&["stage1", "--config", wrong_stage.to_str().unwrap()], tmp.path()).status.code(), Some(EXIT_CONFIG));
    assert_eq!(drawdet(&["stage1", "--bogus"], tmp.path()).status.code(), Some(EXIT_CONFIG));

    let missing = write_config(
        tmp.path(),
        "c.toml",
        "[[datasets]]\nrole = \"train\"\nkind = \"coco\"\nannotations = \"nope.json\"\nimages = \"nope\"\n",
    );
    let out = drawdet(&["stage1", "--config", missing.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_DATA), "{}", String::from_utf8_lossy(&out.stderr));

    let explode = write_config(
        tmp.path(),
        "d.toml",
        &format!("epochs = 2\nlr = 1e300\n{TINY_CORPUS}{}", synth("train", "natural_train")),
    );
    let out = drawdet(&["stage1", "--config", explode.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_NUMERIC), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rerun_from_echo_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "epochs = 1\nbatch_size = 4\n[style_bank]\nmode = \"all\"\n{TINY_CORPUS}{}{}",
        synth("train", "natural_train"),
        synth("dev", "drawing_dev")
    );
    let cfg = write_config(tmp.path(), "s1.toml", &body);
    ok(&drawdet(&["stage1", "--config", cfg.to_str().unwrap(), "--seed", "5", "--output-dir", "first"], tmp.path()));
    let echo = tmp.path().join("first/seed-5/config.echo.toml");
    ok(&drawdet(&["stage1", "--config", echo.to_str().unwrap(), "--output-dir", "second"], tmp.path()));
    let a = fs::read(tmp.path().join("first/seed-5/stage1.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("second/seed-5/stage1.ckpt")).unwrap();
    assert_eq!(a, b);
    assert!(fs::read_to_string(tmp.path().join("first/seed-5/epochs.csv")).unwrap().starts_with("epoch,mean_loss"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gen.toml", TINY_CORPUS);
    let out = Command::new(env!("CARGO_BIN_EXE_drawdet"))
        .args(["gen-synthetic", "--config", cfg.to_str().unwrap(), "--output-dir", "rel"])
        .current_dir(tmp.path())
        .env("DRAWDET_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("root/rel/seed-0/natural_train/annotations.json").exists());
    assert!(!tmp.path().join("rel").exists());
}

fn grid_file(dir: &Path, axes: &str, limit: usize) -> PathBuf {
    let det = Detector::new(&DetectorConfig::desk()).unwrap();
    Checkpoint::new(Stage::Init, 0, DetectorConfig::desk(), det.init_params(1)).save(&dir.join("init.ckpt")).unwrap();
    let base = format!(
        "stage = \"stage3\"\ninit = \"{}\"\nepochs = 0\nseeds = [1, 2]\n{}{}{}",
        dir.join("init.ckpt").display(),
        synth("train", "drawing_labeled_train"),
        synth("test", "drawing_test"),
        TINY_CORPUS
    );
    // Nest the base config under [base] by prefixing its tables.
    let mut text = format!("max_points = {limit}\n[axes]\n{axes}\n[base]\n");
    for l in base.lines() {
        let l = l.replace("[[datasets]]", "[[base.datasets]]").replace("[corpus]", "[base.corpus]");
        text += &l;
        text.push('\n');
    }
    write_config(dir, "grid.toml", &text)
}

#[test]
fn grid_rows_resume_and_limit() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = grid_file(tmp.path(), "epochs = [0, 1]\nsubset_n = [4, 8]", 16);
    let g = grid.to_str().unwrap();
    ok(&drawdet(&["grid", "--config", g, "--output-dir", "full"], tmp.path()));
    let table = fs::read_to_string(tmp.path().join("full/grid.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "point,epochs,subset_n,n_runs,mean_ap,stddev,ap_diff");
    assert_eq!(rows.len(), 5);
    for (i, expect) in ["0,0,4,2,", "1,0,8,2,", "2,1,4,2,", "3,1,8,2,"].iter().enumerate() {
        assert!(rows[i + 1].starts_with(expect), "{}", rows[i + 1]);
    }
    // epochs = 0 returns the init, so both subsets score the same.
    assert_eq!(rows[1].split(',').nth(4), rows[2].split(',').nth(4));

    // Interrupted copy: point 2 never finished and no table was written.
    ok(&drawdet(&["grid", "--config", g, "--output-dir", "part"], tmp.path()));
    let part = tmp.path().join("part");
    fs::remove_file(part.join("grid.csv")).unwrap();
    fs::remove_file(part.join("point-002/point.json")).unwrap();
    fs::remove_file(part.join("point-002/seed-2/done.json")).unwrap();
    fs::remove_file(part.join("point-002/seed-2/stage3.ckpt")).unwrap();
    let untouched = fs::read(part.join("point-000/seed-1/stage3.ckpt")).unwrap();
    ok(&drawdet(&["grid", "--config", g, "--output-dir", "part", "--resume"], tmp.path()));
    assert_eq!(fs::read_to_string(part.join("grid.csv")).unwrap(), table);
    assert_eq!(fs::read(part.join("point-000/seed-1/stage3.ckpt")).unwrap(), untouched);
    assert!(part.join("point-002/seed-2/stage3.ckpt").exists());

    let small = tempfile::tempdir().unwrap();
    let grid = grid_file(small.path(), "epochs = [0, 1]\nsubset_n = [4, 8]", 3);
    let out = drawdet(&["grid", "--config", grid.to_str().unwrap()], small.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("4 points"));
}

#[test]
fn one_point_grid_matches_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = grid_file(tmp.path(), "epochs = [1]", 4);
    ok(&drawdet(&["grid", "--config", grid.to_str().unwrap(), "--output-dir", "g"], tmp.path()));
    let direct = format!(
        "init = \"{}\"\nepochs = 1\nseeds = [1, 2]\n{}{}{}",
        tmp.path().join("init.ckpt").display(),
        synth("train", "drawing_labeled_train"),
        synth("test", "drawing_test"),
        TINY_CORPUS
    );
    let cfg = write_config(tmp.path(), "direct.toml", &direct);
    ok(&drawdet(&["stage3", "--config", cfg.to_str().unwrap(), "--output-dir", "d"], tmp.path()));
    let agg = fs::read_to_string(tmp.path().join("d/aggregate.csv")).unwrap();
    let (n, rest) = agg.lines().nth(1).unwrap().split_once(',').unwrap();
    let row = fs::read_to_string(tmp.path().join("g/grid.csv")).unwrap();
    let row = row.lines().nth(1).unwrap();
    assert_eq!(row, format!("0,1,{n},{rest},0"));
}

#[test]
fn render_counts_and_blank_copies() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    fs::create_dir_all(&imgs).unwrap();
    let mut originals = vec![];
    for i in 0..3 {
        let mut img = Image::filled(80, 48, [0.2 + 0.1 * i as f32, 0.5, 0.7]);
        img.set(3, 4, [1.0, 1.0, 1.0]);
        let p = imgs.join(format!("im{i}.png"));
        img.save_png(&p).unwrap();
        originals.push(fs::read(&p).unwrap());
    }
    fs::write(imgs.join("broken.png"), b"not a png").unwrap();
    let det = Detector::new(&DetectorConfig::desk()).unwrap();
    Checkpoint::new(Stage::Init, 0, DetectorConfig::desk(), det.init_params(2)).save(&tmp.path().join("m.ckpt")).unwrap();
    let out = drawdet(&["render", "--checkpoint", "m.ckpt", "--output-dir", "out", "imgs"], tmp.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rendered 3 images"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    for i in 0..3 {
        let a = image::open(imgs.join(format!("im{i}.png"))).unwrap().to_rgb8();
        let b = image::open(tmp.path().join(format!("out/im{i}.png"))).unwrap().to_rgb8();
        assert_eq!(a, b, "untouched copy expected: init scores stay below 0.65");
    }
    let csv = fs::read_to_string(tmp.path().join("out/detections.csv")).unwrap();
    assert_eq!(csv, "file,class,score,x1,y1,x2,y2\n");
}

#[test]
fn injected_detection_draws_one_rectangle() {
    let cfg = DetectorConfig::desk();
    let outputs: [HeadOutput; 2] = [Klass::Face, Klass::Body].map(|klass| HeadOutput {
        klass,
        levels: cfg
            .strides
            .iter()
            .zip(cfg.grid_sizes())
            .map(|(&stride, g)| LevelOutput { stride, h: g, w: g, logits: vec![-20.0; g * g], reg: vec![0.0; 4 * g * g] })
            .collect(),
    });
    let mut outputs = outputs;
    // Level 1 (stride 8), row 2, col 3, offsets (0.5, 0.5), size exp(0.5) * 8.
    let lvl = &mut outputs[0].levels[1];
    let cell = 2 * lvl.w + 3;
    lvl.logits[cell] = 10.0;
    *lvl.reg_at_mut(cell, 0) = 0.5;
    *lvl.reg_at_mut(cell, 1) = 0.5;
    *lvl.reg_at_mut(cell, 2) = 0.5;
    *lvl.reg_at_mut(cell, 3) = 0.5;
    let dets = postprocess(&outputs, &cfg, 0.65, 0.4).unwrap();
    assert_eq!((dets.face.len(), dets.body.len()), (1, 0));
    let side = 0.5f64.exp() * 8.0;
    let (cx, cy) = (3.5 * 8.0, 2.5 * 8.0);
    let b = dets.face[0].bbox;
    assert!((b.cx - cx).abs() < 1e-12 && (b.cy - cy).abs() < 1e-12 && (b.w - side).abs() < 1e-12);

    let mut raster = image::RgbImage::new(64, 64);
    draw_detections(&mut raster, &dets);
    let x1 = (cx - side / 2.0).round() as u32;
    let y1 = (cy - side / 2.0).round() as u32;
    let x2 = (cx + side / 2.0 - 1.0).round() as u32;
    let y2 = (cy + side / 2.0 - 1.0).round() as u32;
    for (x, y, p) in raster.enumerate_pixels() {
        let on_edge = ((x == x1 || x == x2) && (y1..=y2).contains(&y)) || ((y == y1 || y == y2) && (x1..=x2).contains(&x));
        assert_eq!(p.0, if on_edge { FACE_COLOR } else { [0, 0, 0] }, "pixel ({x}, {y})");
    }
    assert!(raster.pixels().all(|p| p.0 != BODY_COLOR));
}

fn record(iteration: u64, t: f64, s: f64) -> CurveRecord {
    CurveRecord {
        iteration,
        teacher_face_ap: t,
        teacher_body_ap: t / 2.0,
        student_face_ap: s,
        student_body_ap: s / 2.0,
        loss_conf: 0.3,
        loss_reg: 0.1,
        loss_total: 0.5,
    }
}

#[test]
fn plot_is_deterministic_and_rejects_empty_logs() {
    let tmp = tempfile::tempdir().unwrap();
    write_curve_log(&tmp.path().join("phi.csv"), &[record(0, 0.1, 0.1), record(100, 0.3, 0.2)]).unwrap();
    write_curve_log(&tmp.path().join("nophi.csv"), &[record(0, 0.1, 0.1), record(100, 0.2, 0.05)]).unwrap();
    let args = ["plot", "--log", "phi.csv", "--label", "phi", "--log", "nophi.csv", "--label", "never"];
    ok(&drawdet(&[&args[..], &["--output-dir", "a"]].concat(), tmp.path()));
    ok(&drawdet(&[&args[..], &["--output-dir", "b"]].concat(), tmp.path()));
    assert_eq!(tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
    let svg = fs::read_to_string(tmp.path().join("a/face.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(svg.contains("data-label=\"never\""));
    assert!(tmp.path().join("a/body.svg").exists());

    write_curve_log(&tmp.path().join("empty.csv"), &[]).unwrap();
    let out = drawdet(&["plot", "--log", "empty.csv", "--output-dir", "c"], tmp.path());
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}
