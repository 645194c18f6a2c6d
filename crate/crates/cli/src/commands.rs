use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use dbg_core::checkpoint;
use dbg_core::dataio::{load_annotations, load_corpus, synth_corpus, write_corpus, FeatureFormat, SynthConfig, VideoRecord};
use dbg_core::gradcheck;
use dbg_core::labels::Interval;
use dbg_core::metrics::{activitynet_thresholds, thumos_thresholds, EvalReport, VideoEval};
use dbg_core::model::{DbgModel, HiddenWidths, ModelConfig, ModelParameters};
use dbg_core::pfg::SamplingConfig;
use dbg_core::pipeline::{infer_video, parse_proposals_json, prepare_corpus, proposals_json, InputMode, ModeKind, PostConfig, VideoInference};
use dbg_core::postprocess::{RetrievalConfig, SoftNmsConfig};
use dbg_core::train::{history_csv, train as fit_model, EpochReport, LrSchedule, TrainConfig};
use dbg_core::{Precision, Real};

use crate::manifest::{write_file, Run};
use crate::settings::Settings;
use crate::CliError;

const DEFAULT_SCHEDULE: &str = "1e-3:10,1e-4:2";
const DEFAULT_WIDTHS: &str = "256,128,256,512,256";
const ABLATION_CONFIGS: &str = "4/8/4,6/12/6,8/16/8,10/20/10,0/16/0,8/0/8";

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_mode(s: &mut Settings, fallback_length: Option<usize>) -> Result<InputMode, CliError> {
    let kind: ModeKind = s.get::<String>("mode", "rescale".into())?.parse()?;
    Ok(match kind {
        ModeKind::Rescale => InputMode::Rescale {
            length: s.get("L", fallback_length.unwrap_or(100))?,
        },
        ModeKind::Window => InputMode::Window {
            length: s.get("L", fallback_length.unwrap_or(128))?,
            overlap: s.get("overlap", 0.5)?,
        },
    })
}

fn read_precision(s: &mut Settings) -> Result<Precision, CliError> {
    Ok(s.get::<String>("precision", "f32".into())?.parse()?)
}

fn read_widths(s: &mut Settings) -> Result<HiddenWidths, CliError> {
    let raw: String = s.get("widths", DEFAULT_WIDTHS.into())?;
    let v: Vec<usize> = raw
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(format!("--widths expects five integers, got {raw:?}")))?;
    let [dsb_hidden, dsb_out, acr_hidden, tbc_collapse, tbc_hidden] = v[..] else {
        return Err(invalid(format!("--widths expects five integers, got {raw:?}")));
    };
    Ok(HiddenWidths {
        dsb_hidden,
        dsb_out,
        acr_hidden,
        tbc_collapse,
        tbc_hidden,
    })
}

fn read_post(s: &mut Settings, mode: &InputMode) -> Result<PostConfig, CliError> {
    let nms = SoftNmsConfig {
        theta: s.get("snms-theta", mode.default_theta())?,
        eps: s.get("snms-eps", 0.75)?,
        gated: !s.get("snms-ungated", false)?,
    };
    nms.validate()?;
    let retrieval = RetrievalConfig {
        max_count: s.get("max-proposals", 100)?,
        min_score: s.get("min-score", 0.0)?,
    };
    Ok(PostConfig { nms, retrieval })
}

fn read_thresholds(s: &mut Settings) -> Result<Vec<f64>, CliError> {
    match s.get::<String>("iou-set", "activitynet".into())?.as_str() {
        "activitynet" => Ok(activitynet_thresholds()),
        "thumos" => Ok(thumos_thresholds()),
        other => Err(invalid(format!("--iou-set must be activitynet or thumos, got {other:?}"))),
    }
}

/// Everything needed to train one model.
#[derive(Clone)]
struct TrainSetup {
    mode: InputMode,
    precision: Precision,
    widths: HiddenWidths,
    sampling: SamplingConfig,
    config: TrainConfig,
}

fn read_train_setup(s: &mut Settings, sampling: Option<SamplingConfig>) -> Result<TrainSetup, CliError> {
    let mode = read_mode(s, None)?;
    let precision = read_precision(s)?;
    let seed = s.get("seed", 0u64)?;
    let schedule = LrSchedule::parse(&s.get::<String>("lr-schedule", DEFAULT_SCHEDULE.into())?)?;
    let epochs = s.get("epochs", schedule.total_epochs())?;
    let schedule = if epochs == schedule.total_epochs() { schedule } else { schedule.scaled(epochs)? };
    let config = TrainConfig {
        batch_size: s.get("batch-size", 16)?,
        schedule,
        actionness_weight: s.get("lambda", dbg_core::losses::ACTIONNESS_WEIGHT)?,
        seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let widths = read_widths(s)?;
    let sampling = match sampling {
        Some(cfg) => cfg,
        None => SamplingConfig::parse_counts(&s.get::<String>("sampling", "8/16/8".into())?)?,
    };
    Ok(TrainSetup {
        mode,
        precision,
        widths,
        sampling,
        config,
    })
}

/// Feature directory and annotation file of a corpus.
struct CorpusPaths {
    features: std::path::PathBuf,
    annotations: std::path::PathBuf,
}

fn corpus_paths(s: &mut Settings) -> Result<CorpusPaths, CliError> {
    Ok(CorpusPaths {
        features: s.path("features-dir")?,
        annotations: s.path("annotations")?,
    })
}

fn load_videos(paths: &CorpusPaths, run: &mut Run) -> Result<Vec<VideoRecord>, CliError> {
    run.input("features-dir", &paths.features);
    run.input("annotations", &paths.annotations);
    let videos = load_corpus(&paths.features, &paths.annotations)?;
    if videos.is_empty() {
        return Err(invalid(format!("{} lists no videos", paths.annotations.display())));
    }
    Ok(videos)
}

fn channels_of(videos: &[VideoRecord]) -> Result<usize, CliError> {
    let c = videos[0].channels();
    if let Some(v) = videos.iter().find(|v| v.channels() != c) {
        return Err(invalid(format!("video {} has {} channels, {} has {c}", v.id, v.channels(), videos[0].id)));
    }
    Ok(c)
}

fn fit<T: Real>(
    setup: &TrainSetup,
    videos: &[VideoRecord],
    init: Option<ModelParameters<T>>,
    mut on_epoch: impl FnMut(&EpochReport, &ModelParameters<T>) -> Result<(), CliError>,
) -> Result<(ModelParameters<T>, Vec<EpochReport>), CliError> {
    let length = setup.mode.length();
    let params = match init {
        Some(p) => p,
        None => ModelParameters::init(ModelConfig {
            input_channels: channels_of(videos)?,
            length,
            widths: setup.widths,
            sampling: setup.sampling,
            seed: setup.config.seed,
        })?,
    };
    let samples = prepare_corpus::<T>(videos, &setup.mode)?;
    let mut callback_error = None;
    let outcome = fit_model(params, &samples, &setup.config, |report, params| {
        on_epoch(report, params).map_err(|e| {
            let msg = e.to_string();
            callback_error = Some(e);
            dbg_core::Error::Invalid(msg)
        })
    });
    if let Some(e) = callback_error {
        return Err(e);
    }
    let outcome = outcome?;
    Ok((outcome.params, outcome.history))
}

pub fn synth(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        videos: s.get("videos", defaults.videos)?,
        length: s.get("length", defaults.length)?,
        channels: s.get("channels", defaults.channels)?,
        actions: s.get("actions", defaults.actions)?,
        classes: s.get("classes", defaults.classes)?,
        noise: s.get("noise", defaults.noise)?,
        seconds_per_unit: s.get("seconds-per-unit", defaults.seconds_per_unit)?,
        seed: s.get("seed", defaults.seed)?,
    };
    let format: FeatureFormat = s.get::<String>("format", "bin".into())?.parse()?;
    run.manifest.seed = Some(cfg.seed);
    run.record_settings(s)?;

    run.stage("generate");
    let corpus = synth_corpus(&cfg)?;
    run.stage("write");
    let features = run.output("features-dir", "features");
    let annotations = run.output("annotations", "annotations.json");
    write_corpus(&corpus.videos, &features, &annotations, format)?;
    if !corpus.short.is_empty() {
        run.note("videos_with_fewer_actions", &corpus.short);
        eprintln!("warning: {} videos received fewer actions than requested", corpus.short.len());
    }
    println!("wrote {} videos to {}", corpus.videos.len(), run.dir.display());
    Ok(())
}

pub fn train(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let setup = read_train_setup(s, None)?;
    let init = match s.is_set("checkpoint") {
        true => Some(s.path("checkpoint")?),
        false => None,
    };
    let paths = corpus_paths(s)?;
    run.manifest.seed = Some(setup.config.seed);
    run.record_settings(s)?;

    run.stage("load");
    let videos = load_videos(&paths, run)?;
    if let Some(p) = &init {
        run.input("checkpoint", p);
    }
    run.stage("train");
    match setup.precision {
        Precision::F32 => train_with::<f32>(&setup, &videos, init.as_deref(), run),
        Precision::F64 => train_with::<f64>(&setup, &videos, init.as_deref(), run),
    }
}

fn train_with<T: Real>(setup: &TrainSetup, videos: &[VideoRecord], init: Option<&Path>, run: &mut Run) -> Result<(), CliError> {
    let init = match init {
        Some(p) => {
            let (params, _) = checkpoint::load::<T>(p)?;
            if params.config().length != setup.mode.length() {
                return Err(invalid(format!("checkpoint has L={}, run uses L={}", params.config().length, setup.mode.length())));
            }
            Some(params)
        }
        None => None,
    };
    let ckpt = run.output("checkpoint", "checkpoint.bin");
    let csv = run.output("losses", "loss.csv");
    let mut history = Vec::new();
    let (_, history) = {
        let history = &mut history;
        fit(setup, videos, init, |report, params| {
            history.push(report.clone());
            println!(
                "epoch {:>4}  lr {:.0e}  loss {:.5}  (a {:.4} s {:.4} e {:.4} c {:.4})",
                report.epoch, report.lr, report.losses.total, report.losses.actionness, report.losses.start, report.losses.end, report.losses.completeness
            );
            checkpoint::save(&ckpt, params, Some(report.epoch))?;
            write_file(&csv, history_csv(history).as_bytes())
        })?
    };
    run.note("epochs", history.len());
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        run.note("first_epoch_loss", first.losses.total);
        run.note("final_loss", last.losses.total);
    }
    Ok(())
}

pub fn infer(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let ckpt = s.path("checkpoint")?;
    run.input("checkpoint", &ckpt);
    let precision = read_precision(s)?;
    let stored_length = checkpoint::load::<f32>(&ckpt).map(|(p, _)| p.config().length)?;
    let mode = read_mode(s, Some(stored_length))?;
    let post = read_post(s, &mode)?;
    let save_maps = s.get("save-maps", true)?;
    let paths = corpus_paths(s)?;
    run.record_settings(s)?;

    run.stage("load");
    let videos = load_videos(&paths, run)?;
    let results = match precision {
        Precision::F32 => infer_with::<f32>(&ckpt, &videos, &mode, &post, run)?,
        Precision::F64 => infer_with::<f64>(&ckpt, &videos, &mode, &post, run)?,
    };

    run.stage("write");
    let proposals = run.output("proposals", "proposals.json");
    write_file(&proposals, proposals_json(&results)?.as_bytes())?;
    if save_maps {
        let dir = run.output("maps", "maps");
        fs::create_dir_all(&dir).map_err(|e| invalid(format!("cannot create {}: {e}", dir.display())))?;
        for r in &results {
            let json = serde_json::to_string(&r.maps).map_err(|e| invalid(e.to_string()))?;
            write_file(&dir.join(format!("{}.json", r.id)), json.as_bytes())?;
        }
    }
    println!("{} videos, proposals in {}", results.len(), proposals.display());
    Ok(())
}

fn infer_with<T: Real>(ckpt: &Path, videos: &[VideoRecord], mode: &InputMode, post: &PostConfig, run: &mut Run) -> Result<Vec<VideoInference>, CliError> {
    let (params, _) = checkpoint::load::<T>(ckpt)?;
    let model = DbgModel::new(params)?;
    run.stage("inference");
    let started = Instant::now();
    let results = videos
        .iter()
        .map(|v| infer_video(&model, v, mode, post))
        .collect::<Result<Vec<_>, _>>()?;
    run.note("seconds_per_video", started.elapsed().as_secs_f64() / videos.len().max(1) as f64);
    Ok(results)
}

fn eval_videos(proposals: &BTreeMap<String, Vec<(f64, f64, f64)>>, annotations: &Path) -> Result<(Vec<VideoEval>, Vec<String>), CliError> {
    let records = load_annotations(annotations)?;
    let videos = records
        .iter()
        .map(|(id, rec)| VideoEval {
            id: id.clone(),
            proposals: proposals
                .get(id)
                .map(|list| list.iter().map(|&(s, e, _)| Interval::new(s, e)).collect())
                .unwrap_or_default(),
            gts: rec.segments.iter().map(|&(s, e)| Interval::new(s, e)).collect(),
        })
        .collect();
    let unknown = proposals.keys().filter(|id| !records.contains_key(*id)).cloned().collect();
    Ok((videos, unknown))
}

fn write_report(run: &mut Run, report: &EvalReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).map_err(|e| invalid(e.to_string()))?;
    write_file(&run.output("report", "report.json"), json.as_bytes())?;
    write_file(&run.output("summary", "report.csv"), report.summary_csv().as_bytes())?;
    write_file(&run.output("recall_matrix", "recall_matrix.csv"), report.recall_matrix_csv().as_bytes())
}

pub fn eval(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let proposals_path = s.path("proposals")?;
    let annotations = s.path("annotations")?;
    let thresholds = read_thresholds(s)?;
    run.record_settings(s)?;
    run.input("proposals", &proposals_path);
    run.input("annotations", &annotations);

    run.stage("evaluate");
    let text = fs::read_to_string(&proposals_path).map_err(|e| invalid(format!("cannot read {}: {e}", proposals_path.display())))?;
    let proposals = parse_proposals_json(&text)?;
    let (videos, unknown) = eval_videos(&proposals, &annotations)?;
    if !unknown.is_empty() {
        eprintln!("warning: {} proposal lists have no annotation and were ignored", unknown.len());
        run.note("ignored_ids", &unknown);
    }
    let report = EvalReport::compute(&videos, &thresholds)?;
    run.stage("write");
    write_report(run, &report)?;
    for (an, ar) in &report.ar_at {
        println!("AR@{an:<4} {ar:.4}");
    }
    println!("AUC     {:.2}", report.auc);
    Ok(())
}

pub fn gradcheck(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let seed = s.get("seed", 0u64)?;
    run.manifest.seed = Some(seed);
    run.record_settings(s)?;
    run.stage("check");
    let reports = gradcheck::run_all(seed)?;
    let mut csv = String::from("check,max_rel_error,coordinates,passed\n");
    for r in &reports {
        println!("{:<40} {:>10.3e}  {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
        csv.push_str(&format!("{},{:e},{},{}\n", r.name, r.max_rel_error, r.coordinates, r.passed()));
    }
    write_file(&run.output("report", "gradcheck.csv"), csv.as_bytes())?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    run.note("max_rel_error", worst);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {:.0e}", reports.len(), gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, serde::Serialize)]
struct AblationRow {
    sampling: String,
    final_loss: f64,
    ar_at: Vec<(usize, f64)>,
    auc: f64,
}

pub fn ablate(s: &mut Settings, run: &mut Run) -> Result<(), CliError> {
    let configs: Vec<SamplingConfig> = s
        .get::<String>("configs", ABLATION_CONFIGS.into())?
        .split(',')
        .map(SamplingConfig::parse_counts)
        .collect::<Result<_, _>>()?;
    let holdout: f64 = s.get("holdout", 0.25)?;
    if !(0.0..1.0).contains(&holdout) {
        return Err(invalid(format!("--holdout must lie in [0, 1), got {holdout}")));
    }
    let setup = read_train_setup(s, Some(configs[0]))?;
    let post = read_post(s, &setup.mode)?;
    let thresholds = read_thresholds(s)?;
    let paths = corpus_paths(s)?;
    run.manifest.seed = Some(setup.config.seed);
    run.record_settings(s)?;

    run.stage("load");
    let videos = load_videos(&paths, run)?;
    let held = ((videos.len() as f64) * holdout).ceil() as usize;
    if held >= videos.len() {
        return Err(invalid(format!("holdout of {held} leaves no training videos out of {}", videos.len())));
    }
    let (train_set, eval_set) = if held == 0 {
        (&videos[..], &videos[..])
    } else {
        videos.split_at(videos.len() - held)
    };
    run.note("train_videos", train_set.iter().map(|v| &v.id).collect::<Vec<_>>());
    run.note("eval_videos", eval_set.iter().map(|v| &v.id).collect::<Vec<_>>());

    let mut rows = Vec::new();
    for cfg in &configs {
        run.stage(&format!("config {}", cfg.label()));
        let setup = TrainSetup { sampling: *cfg, ..setup.clone() };
        let row = match setup.precision {
            Precision::F32 => ablate_one::<f32>(&setup, train_set, eval_set, &post, &thresholds)?,
            Precision::F64 => ablate_one::<f64>(&setup, train_set, eval_set, &post, &thresholds)?,
        };
        println!(
            "{:<9} loss {:.4}  AR@100 {:.4}  AUC {:.2}",
            row.sampling,
            row.final_loss,
            row.ar_at.iter().find(|(an, _)| *an == 100).map_or(f64::NAN, |x| x.1),
            row.auc
        );
        rows.push(row);
    }

    run.stage("write");
    let mut csv = String::from("sampling,final_loss");
    for (an, _) in &rows[0].ar_at {
        csv.push_str(&format!(",ar@{an}"));
    }
    csv.push_str(",auc\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e}", r.sampling, r.final_loss));
        for (_, ar) in &r.ar_at {
            csv.push_str(&format!(",{ar}"));
        }
        csv.push_str(&format!(",{}\n", r.auc));
    }
    write_file(&run.output("table", "ablation.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| invalid(e.to_string()))?;
    write_file(&run.output("report", "ablation.json"), json.as_bytes())?;
    Ok(())
}

fn ablate_one<T: Real>(
    setup: &TrainSetup,
    train_set: &[VideoRecord],
    eval_set: &[VideoRecord],
    post: &PostConfig,
    thresholds: &[f64],
) -> Result<AblationRow, CliError> {
    let (params, history) = fit::<T>(setup, train_set, None, |_, _| Ok(()))?;
    let model = DbgModel::new(params)?;
    let evals = eval_set
        .iter()
        .map(|v| {
            let r = infer_video(&model, v, &setup.mode, post)?;
            Ok(VideoEval {
                id: v.id.clone(),
                proposals: r.proposals.iter().map(|p| p.interval()).collect(),
                gts: v.segments.iter().map(|&(s, e)| Interval::new(s, e)).collect(),
            })
        })
        .collect::<Result<Vec<_>, dbg_core::Error>>()?;
    let report = EvalReport::compute(&evals, thresholds)?;
    Ok(AblationRow {
        sampling: setup.sampling.label(),
        final_loss: history.last().map_or(f64::NAN, |r| r.losses.total),
        ar_at: report.ar_at.clone(),
        auc: report.auc,
    })
}
