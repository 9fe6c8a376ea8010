use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use maskeval_core::boxes::{BBox, Detection, GroundTruth};
use maskeval_core::detect::{classes_with_ground_truth, mean_ap, parse_thresholds, ImageEval, MapReport};
use maskeval_core::embed::{BlockMeanEmbedder, Embedder, PrecomputedEmbeddings};
use maskeval_core::image_io::{load_raster, save_raster};
use maskeval_core::losses::{grad_check_random, GradCheckSummary, LossKind};
use maskeval_core::manifest::{Manifest, MaskState, Spectrum};
use maskeval_core::protocol::{
    build_gallery, checkpoint, parse_domains, parse_ops, preprocess, run_identification, run_verification, DirSource,
    Domain, Features, IdentifyOptions, PreprocessOptions, Provenance, Route, VerifyOptions,
};
use maskeval_core::recog::{
    build_condition_matrix, degradation_delta, fold_results_to_csv, load_fold_results, ConditionMatrix,
};
use maskeval_core::reference::identification_cross_spectral;
use maskeval_core::report::{reference_report, DeltaLine};
use maskeval_core::splits::{
    holdout_keys, load_plans, plans_to_json, split_holdout, split_kfold_by, Partition, SplitPlan, SplitScheme,
    SplitUnit,
};
use maskeval_core::synth::{write_corpus, SynthConfig};
use maskeval_core::VERSION;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn run(rc: &RunConfig) -> Result<(), CliError> {
    match rc.command.as_str() {
        "detect-eval" => detect_eval(rc),
        "preprocess" => preprocess_cmd(rc),
        "split" => split(rc),
        "verify" => verify(rc),
        "identify" => identify(rc),
        "checkpoint" => checkpoint_cmd(rc),
        "report" => report(rc),
        "grad-check" => grad_check(rc),
        "synth" => synth(rc),
        other => unreachable!("unregistered command {other}"),
    }
}

/// Every JSON report carries the tool version and the resolved configuration.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    result: &'a T,
}

fn envelope<T: Serialize>(rc: &RunConfig, result: &T) -> String {
    let e = Envelope {
        tool: "maskeval",
        version: VERSION,
        config: rc,
        result,
    };
    let mut s = serde_json::to_string_pretty(&e).expect("report serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::output(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

fn load_manifest(path: &Path) -> Result<(Manifest, DirSource), CliError> {
    let manifest = Manifest::load(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, DirSource::new(root)))
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

// ---------------------------------------------------------------------------------------

#[derive(Deserialize)]
struct BoxRecord {
    image_path: String,
    class_id: usize,
    score: Option<f64>,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct DetectResult {
    images: usize,
    ground_truths: usize,
    detections: usize,
    classes: Vec<usize>,
    #[serde(flatten)]
    report: MapReport,
}

fn detect_eval(rc: &RunConfig) -> Result<(), CliError> {
    let thresholds = parse_thresholds(rc.str("iou-thresholds"))?;
    let gt_path = rc.required_path("gt");
    let det_path = rc.required_path("detections");
    let mut images: BTreeMap<String, ImageEval> = BTreeMap::new();
    let at = |path: &Path, i: usize, e: &dyn std::fmt::Display| CliError::Input(format!("{} entry {i}: {e}", path.display()));
    let gts = read_boxes(&gt_path)?;
    for (i, r) in gts.iter().enumerate() {
        let bbox = BBox::new(r.x, r.y, r.w, r.h).map_err(|e| at(&gt_path, i, &e))?;
        images
            .entry(r.image_path.clone())
            .or_insert_with(|| ImageEval::new(vec![], vec![]))
            .ground_truths
            .push(GroundTruth::new(bbox, r.class_id));
    }
    let dets = read_boxes(&det_path)?;
    for (i, r) in dets.iter().enumerate() {
        let score = r.score.ok_or_else(|| at(&det_path, i, &"missing score"))?;
        let bbox = BBox::new(r.x, r.y, r.w, r.h).map_err(|e| at(&det_path, i, &e))?;
        let det = Detection::new(bbox, r.class_id, score).map_err(|e| at(&det_path, i, &e))?;
        images
            .entry(r.image_path.clone())
            .or_insert_with(|| ImageEval::new(vec![], vec![]))
            .detections
            .push(det);
    }
    let images: Vec<ImageEval> = images.into_values().collect();
    let classes = match rc.str("classes") {
        "auto" => classes_with_ground_truth(&images),
        list => list
            .split(',')
            .map(|c| c.trim().parse::<usize>().map_err(|e| config_err(format!("--classes {c:?}: {e}"))))
            .collect::<Result<_, _>>()?,
    };
    if classes.is_empty() {
        return Err(CliError::Data(format!("{}: no ground-truth boxes", gt_path.display())));
    }
    let report = mean_ap(&images, &classes, &thresholds)?;
    let result = DetectResult {
        images: images.len(),
        ground_truths: gts.len(),
        detections: dets.len(),
        classes,
        report,
    };
    let json = envelope(rc, &result);
    match rc.str("out") {
        "-" => print!("{json}"),
        out => {
            write_file(Path::new(out), &json)?;
            print!("{}", detect_text(&result));
        }
    }
    Ok(())
}

fn detect_text(r: &DetectResult) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "mAP {:.4}  mAP50 {}  mAP75 {}  ({} images, {} gt, {} detections)",
        r.report.map,
        opt(r.report.map50),
        opt(r.report.map75),
        r.images,
        r.ground_truths,
        r.detections
    );
    let _ = writeln!(s, "{:>6} {:>8} {:>8}", "class", "gt", "AP");
    for c in &r.report.per_class {
        let _ = writeln!(s, "{:>6} {:>8} {:>8.4}", c.class_id, c.gt_count, c.ap);
    }
    s
}

// ---------------------------------------------------------------------------------------

#[derive(Serialize)]
struct PreprocessResult<'a> {
    images: usize,
    records: Vec<&'a Provenance>,
}

fn preprocess_cmd(rc: &RunConfig) -> Result<(), CliError> {
    let (manifest, source) = load_manifest(&rc.required_path("manifest"))?;
    let opts = PreprocessOptions {
        ops: parse_ops(rc.str("ops"))?,
        seed: rc.parse("seed")?,
        occlude_fill: rc.parse("fill")?,
    };
    let outputs = preprocess(&manifest, &source, &opts)?;
    let out = rc.required_path("out");
    create_dir(&out)?;
    for o in &outputs {
        let path = out.join(&o.provenance.output);
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        save_raster(&o.raster, &path).map_err(|e| CliError::output(&path, e))?;
    }
    let entries: Option<Vec<_>> = outputs.iter().map(|o| o.entry.clone()).collect();
    if let Some(entries) = entries {
        let m = Manifest::new(entries, manifest.class_count())?;
        let path = out.join("manifest.csv");
        m.save(&path).map_err(|e| CliError::output(&path, e))?;
    }
    let result = PreprocessResult {
        images: outputs.len(),
        records: outputs.iter().map(|o| &o.provenance).collect(),
    };
    write_file(&out.join("provenance.json"), &envelope(rc, &result))?;
    println!("wrote {} images to {}", outputs.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------------------

fn parse_unit(rc: &RunConfig) -> Result<SplitUnit, CliError> {
    match rc.str("unit") {
        "subject" => Ok(SplitUnit::Subject),
        "sample" => Ok(SplitUnit::Sample),
        other => Err(config_err(format!("--unit {other:?}: expected subject or sample"))),
    }
}

fn parse_fractions(s: &str) -> Result<[f64; 3], CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| config_err(format!("--fractions {s:?}: {e}")))?;
    v.try_into()
        .map_err(|_| config_err(format!("--fractions {s:?}: expected three values")))
}

fn split_summary(plans: &[SplitPlan], manifest: &Manifest) -> String {
    let mut s = String::new();
    for (i, plan) in plans.iter().enumerate() {
        let counts = plan.partition_counts(manifest);
        let _ = writeln!(s, "plan {i}: {:?}", plan.k_or_fractions);
        for p in Partition::ALL {
            if let Some(c) = counts.get(&p) {
                let conds: Vec<String> = c.by_condition.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = writeln!(s, "  {:<10} subjects {:>5}  images {:>7}  {}", p.to_string(), c.subjects, c.images, conds.join(" "));
            }
        }
    }
    s
}

fn split(rc: &RunConfig) -> Result<(), CliError> {
    let (manifest, _) = load_manifest(&rc.required_path("manifest"))?;
    let seed: u64 = rc.parse("seed")?;
    let unit = parse_unit(rc)?;
    let plans = match rc.str("mode") {
        "holdout" => {
            let fractions = parse_fractions(rc.str("fractions"))?;
            match unit {
                SplitUnit::Subject => vec![split_holdout(&manifest, fractions, seed)?],
                SplitUnit::Sample => {
                    let keys = manifest.entries().iter().map(|e| e.path.clone()).collect();
                    vec![SplitPlan::from_assignments(
                        seed,
                        unit,
                        SplitScheme::Fractions(fractions),
                        holdout_keys(keys, fractions, seed)?,
                    )]
                }
            }
        }
        "kfold" => split_kfold_by(&manifest, rc.parse("folds")?, seed, unit)?,
        other => return Err(config_err(format!("--mode {other:?}: expected holdout or kfold"))),
    };
    let mut json = plans_to_json(&plans);
    json.push('\n');
    match rc.str("out") {
        "-" => print!("{json}"),
        out => {
            write_file(Path::new(out), &json)?;
            print!("{}", split_summary(&plans, &manifest));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------

enum FeatureChoice {
    Pixels(BlockMeanEmbedder),
    Precomputed(PrecomputedEmbeddings),
}

fn feature_choice(rc: &RunConfig) -> Result<FeatureChoice, CliError> {
    let grid: u32 = rc.parse("grid")?;
    match rc.str("features") {
        "blockmean" => Ok(FeatureChoice::Pixels(BlockMeanEmbedder::new(grid))),
        "periocular" => Ok(FeatureChoice::Pixels(BlockMeanEmbedder::periocular(grid)?)),
        "precomputed" => {
            let path = rc
                .path("embeddings")
                .ok_or_else(|| config_err("--features precomputed needs --embeddings"))?;
            Ok(FeatureChoice::Precomputed(PrecomputedEmbeddings::load(path)?))
        }
        other => Err(config_err(format!(
            "--features {other:?}: expected blockmean, periocular or precomputed"
        ))),
    }
}

fn features<'a>(choice: &'a FeatureChoice, source: &'a DirSource) -> Features<'a> {
    match choice {
        FeatureChoice::Pixels(e) => Features::Pixels {
            embedder: e,
            source,
        },
        FeatureChoice::Precomputed(p) => Features::Precomputed(p),
    }
}

fn write_matrix_outputs(
    rc: &RunConfig,
    stem: &str,
    json: &str,
    text: &str,
    csv: Option<String>,
) -> Result<(), CliError> {
    if let Some(dir) = rc.path("out") {
        create_dir(&dir)?;
        write_file(&dir.join(format!("{stem}.json")), json)?;
        write_file(&dir.join(format!("{stem}.txt")), text)?;
        if let Some(csv) = csv {
            write_file(&dir.join("fold_results.csv"), &csv)?;
        }
    }
    print!("{text}");
    Ok(())
}

fn verify(rc: &RunConfig) -> Result<(), CliError> {
    let (manifest, source) = load_manifest(&rc.required_path("manifest"))?;
    let seed: u64 = rc.parse("seed")?;
    let choice = feature_choice(rc)?;
    let plans = match rc.path("plan") {
        Some(p) => load_plans(p)?,
        None => split_kfold_by(&manifest, rc.parse("folds")?, seed, parse_unit(rc)?)?,
    };
    let spectrum: Spectrum = rc
        .str("spectrum")
        .parse()
        .map_err(|()| config_err(format!("--spectrum {:?}: expected visual or thermal", rc.str("spectrum"))))?;
    let features = features(&choice, &source);
    let opts = VerifyOptions {
        spectrum,
        margin: rc.parse("margin")?,
        max_pairs: rc.parse("max-pairs")?,
        seed,
    };
    if !(opts.margin > 0.0) {
        return Err(config_err("--margin must be positive"));
    }
    let report = run_verification(&manifest, &plans, &features, &opts)?;
    let mut text = report
        .matrix
        .to_text_table(&format!("Verification accuracy ({spectrum}, {})", report.features));
    let _ = writeln!(text, "\n{:>4} {:>5} {:>10} {:>9}  held-out accuracy a / b / c", "fold", "train", "threshold", "train acc");
    for f in &report.folds {
        let accs: Vec<String> = f.tests.iter().map(|t| format!("{:.4}", t.accuracy)).collect();
        let _ = writeln!(
            text,
            "{:>4} {:>5} {:>10.6} {:>9.4}  {}",
            f.fold,
            f.train_cond,
            f.threshold,
            f.train_accuracy,
            accs.join(" / ")
        );
    }
    write_matrix_outputs(
        rc,
        "verification",
        &envelope(rc, &report),
        &text,
        Some(fold_results_to_csv(&report.fold_results)),
    )
}

#[derive(Serialize)]
struct ReferenceIdentification {
    matrix: ConditionMatrix,
    deltas: Vec<DeltaLine>,
}

fn identify(rc: &RunConfig) -> Result<(), CliError> {
    if rc.flag("reference-tables")? {
        let full = reference_report()?;
        let result = ReferenceIdentification {
            matrix: identification_cross_spectral(),
            deltas: full
                .deltas
                .iter()
                .chain(std::iter::once(&full.table_cell_variant))
                .filter(|d| d.baseline.table == maskeval_core::report::CROSS_SPECTRAL)
                .cloned()
                .collect(),
        };
        let mut text = result.matrix.to_text_table("Identification accuracy (reference)");
        text.push('\n');
        for d in &result.deltas {
            let _ = writeln!(text, "{:<55} {:.4} - {:.4} = {}", d.label, d.baseline.value, d.degraded.value, d.rounded);
        }
        return write_matrix_outputs(rc, "identification", &envelope(rc, &result), &text, None);
    }
    let manifest_path = rc
        .path("manifest")
        .ok_or_else(|| config_err("--manifest is required unless --reference-tables true"))?;
    let (manifest, source) = load_manifest(&manifest_path)?;
    let choice = feature_choice(rc)?;
    let features = features(&choice, &source);
    let opts = IdentifyOptions {
        domains: parse_domains(rc.str("domains"))?,
        folds: rc.parse("folds")?,
        seed: rc.parse("seed")?,
    };
    let report = run_identification(&manifest, &features, &opts)?;
    let text = report
        .matrix
        .to_text_table(&format!("Identification accuracy ({})", report.features));
    write_matrix_outputs(
        rc,
        "identification",
        &envelope(rc, &report),
        &text,
        Some(fold_results_to_csv(&report.fold_results)),
    )
}

// ---------------------------------------------------------------------------------------

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Mask state of `probe` as recorded in `manifest_path`.
fn manifest_mask_state(manifest_path: &Path, probe: &Path) -> Result<MaskState, CliError> {
    let (manifest, source) = load_manifest(manifest_path)?;
    let want = normalize(probe);
    manifest
        .entries()
        .iter()
        .find(|e| normalize(Path::new(&e.path)) == want || normalize(&source.resolve(&e.path)) == want)
        .map(|e| e.mask_state)
        .ok_or_else(|| CliError::Data(format!("{} is not listed in {}", probe.display(), manifest_path.display())))
}

#[derive(Serialize)]
struct CheckpointResult<'a> {
    probe: String,
    trace: &'a maskeval_core::protocol::CheckpointTrace,
}

fn checkpoint_cmd(rc: &RunConfig) -> Result<(), CliError> {
    let visual_path = rc.required_path("visual");
    let masked = match rc.str("masked") {
        "manifest" => {
            let m = rc
                .path("manifest")
                .ok_or_else(|| config_err("--masked manifest needs --manifest"))?;
            manifest_mask_state(&m, &visual_path)? == MaskState::Masked
        }
        _ => rc.flag("masked")?,
    };
    let embedder = match feature_choice(rc)? {
        FeatureChoice::Pixels(e) => e,
        FeatureChoice::Precomputed(_) => return Err(config_err("checkpoint embeds pixels; use blockmean or periocular")),
    };
    let (gallery_manifest, gallery_source) = load_manifest(&rc.required_path("gallery"))?;
    let features = Features::Pixels {
        embedder: &embedder,
        source: &gallery_source,
    };
    let visual = load_raster(&visual_path)?;
    let thermal_path = rc.path("thermal");
    let outcome = checkpoint(
        &visual,
        || thermal_path.as_ref().map(load_raster).transpose().map_err(Into::into),
        masked,
        &embedder as &dyn Embedder,
        |route| {
            let domain = match route {
                Route::Visual => Domain::Visual,
                Route::Hybrid => Domain::Hybrid,
            };
            build_gallery(&gallery_manifest, domain, &features)
        },
    )?;
    let json = envelope(
        rc,
        &CheckpointResult {
            probe: visual_path.display().to_string(),
            trace: &outcome.trace,
        },
    );
    match rc.path("out") {
        Some(dir) => {
            create_dir(&dir)?;
            write_file(&dir.join("trace.json"), &json)?;
            if let Some(h) = &outcome.hybrid {
                let p = dir.join("hybrid.png");
                save_raster(h, &p).map_err(|e| CliError::output(&p, e))?;
            }
            for step in &outcome.trace.steps {
                println!("{step}");
            }
        }
        None => print!("{json}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------

fn order(list: &str, seen: impl Iterator<Item = String>) -> Vec<String> {
    if list == "auto" {
        let mut out: Vec<String> = Vec::new();
        for s in seen {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    } else {
        list.split(',').map(|s| s.trim().to_string()).collect()
    }
}

fn cell_arg(rc: &RunConfig, key: &str) -> Result<Option<(String, String)>, CliError> {
    rc.optional(key)
        .map(|v| {
            v.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| config_err(format!("--{key} {v:?}: expected train:test")))
        })
        .transpose()
}

#[derive(Serialize)]
struct MatrixReport {
    matrix: ConditionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_rounded: Option<String>,
}

fn report(rc: &RunConfig) -> Result<(), CliError> {
    let Some(path) = rc.path("fold-results") else {
        let r = reference_report()?;
        return write_matrix_outputs(rc, "report", &envelope(rc, &r), &r.to_text(), None);
    };
    let results = load_fold_results(path)?;
    let rows = order(rc.str("rows"), results.iter().map(|r| r.train_cond.clone()));
    let cols = order(rc.str("cols"), results.iter().map(|r| r.test_cond.clone()));
    let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let matrix = build_condition_matrix(&results, &rows, &cols)?;
    let delta = match (cell_arg(rc, "baseline")?, cell_arg(rc, "degraded")?) {
        (Some(b), Some(d)) => Some(degradation_delta(&matrix, (&b.0, &b.1), (&d.0, &d.1))?),
        (None, None) => None,
        _ => return Err(config_err("--baseline and --degraded go together")),
    };
    let mut text = matrix.to_text_table(rc.str("title"));
    if let Some(d) = delta {
        let _ = writeln!(text, "\ndegradation {} -> {}: {d:.4}", rc.str("baseline"), rc.str("degraded"));
    }
    let result = MatrixReport {
        matrix,
        delta,
        delta_rounded: delta.map(|d| format!("{d:.4}")),
    };
    write_matrix_outputs(rc, "report", &envelope(rc, &result), &text, None)
}

// ---------------------------------------------------------------------------------------

fn grad_check(rc: &RunConfig) -> Result<(), CliError> {
    let kinds: Vec<LossKind> = match rc.str("loss") {
        "all" => LossKind::ALL.to_vec(),
        one => vec![one.parse()?],
    };
    let points: usize = rc.parse("points")?;
    let step: f64 = rc.parse("step")?;
    let tol: f64 = rc.parse("tol")?;
    let seed: u64 = rc.parse("seed")?;
    let summaries = kinds
        .iter()
        .map(|&k| grad_check_random(k, points, seed, step, tol))
        .collect::<Result<Vec<GradCheckSummary>, _>>()?;
    let mut text = format!(
        "{:<12} {:>7} {:>7} {:>12} {:<8} {}\n",
        "loss", "points", "passed", "max rel err", "worst", "result"
    );
    for s in &summaries {
        let _ = writeln!(
            text,
            "{:<12} {:>7} {:>7} {:>12.3e} {:<8} {}",
            s.loss.to_string(),
            s.points,
            s.passed,
            s.max_relative_error,
            s.worst_coordinate,
            if s.all_passed() { "PASS" } else { "FAIL" }
        );
    }
    print!("{text}");
    if let Some(p) = rc.path("out") {
        write_file(&p, &envelope(rc, &summaries))?;
    }
    let failed: Vec<String> = summaries.iter().filter(|s| !s.all_passed()).map(|s| s.loss.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn synth(rc: &RunConfig) -> Result<(), CliError> {
    let cfg = SynthConfig {
        subjects: rc.parse("subjects")?,
        frames_per_subject: rc.parse("frames")?,
        pixel_noise: rc.parse("noise")?,
        frame_jitter: rc.parse("jitter")?,
        seed: rc.parse("seed")?,
    };
    if cfg.subjects == 0 || cfg.frames_per_subject == 0 {
        return Err(config_err("--subjects and --frames must be positive"));
    }
    let out = rc.required_path("out");
    let m = write_corpus(&cfg, &out)?;
    println!(
        "wrote {} images of {} subjects to {}",
        m.len(),
        m.subjects().len(),
        out.join("manifest.csv").display()
    );
    Ok(())
}
