use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mcunet::arch::Model;
use mcunet::data::{
    crop, ensure_rgb, load_image, load_model, load_sample, pad_to, probability_raster, save_model,
    write_pnm, Manifest, ManifestEntry, Sample,
};
use mcunet::gradcheck::{format_report, run_suite, GradcheckOptions};
use mcunet::train::{evaluate, percent, train, EvalReport, EPOCH_CSV_HEADER};
use mcunet::{Error, Result};

use crate::config::RunConfig;

/// Reason for a non-zero exit that is not an [`Error`].
pub struct Failure(pub String);

pub enum Outcome {
    Ok,
    Failed(Failure),
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(format!("creating {}", path.display())))
}

fn load_split(entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries.iter().map(load_sample).collect()
}

/// `metrics.csv`, `per_image.csv` and, when both classes occur, `roc.csv`.
fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("metrics.csv"), report.metrics_table())?;
    write_file(&dir.join("per_image.csv"), report.per_image_csv())?;
    if let Some(roc) = &report.roc {
        write_file(&dir.join("roc.csv"), roc.to_csv())?;
    }
    Ok(())
}

pub struct TrainSummary {
    pub parameters: usize,
    pub manifest_hash: String,
    pub eval: Option<EvalReport>,
}

/// Trains per `cfg` into `out`: resolved config and manifest, epoch log,
/// checkpoints, final model and test-split metrics.
pub fn run_training(cfg: &RunConfig, manifest: &Manifest, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    let resolved = RunConfig {
        output_dir: Some(out.to_path_buf()),
        ..cfg.clone()
    };
    write_file(&out.join("config.json"), resolved.to_json())?;
    write_file(&out.join("manifest.json"), manifest.to_json())?;
    let train_set = load_split(&manifest.train)?;
    let test_set = load_split(&manifest.test)?;

    let mut model = Model::<f32>::new(cfg.network.clone())?;
    let parameters = model.parameter_count();
    let log_path = out.join("epochs.csv");
    write_file(&log_path, format!("{EPOCH_CSV_HEADER}\n"))?;
    let checkpoints = out.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let logs = train(
        &mut model,
        &train_set,
        &test_set,
        &cfg.train,
        |log, model| {
            let mut file = OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(io_err(format!("opening {}", log_path.display())))?;
            writeln!(file, "{}", log.csv_row())
                .map_err(io_err(format!("writing {}", log_path.display())))?;
            if every > 0 && log.epoch % every == 0 {
                create_dir(&checkpoints)?;
                save_model(
                    model,
                    &checkpoints.join(format!("epoch_{:04}.mcun", log.epoch)),
                )?;
            }
            Ok(())
        },
    )?;
    save_model(&model, &out.join("model.mcun"))?;
    let eval = logs.into_iter().last().and_then(|l| l.eval);
    if let Some(report) = &eval {
        write_eval(out, report)?;
    }
    Ok(TrainSummary {
        parameters,
        manifest_hash: manifest.content_hash(),
        eval,
    })
}

pub fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let out = out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        Error::Config("no output directory: pass --out or set \"output_dir\"".into())
    })?;
    let manifest = cfg.manifest()?;
    let summary = run_training(&cfg, &manifest, &out)?;
    if let Some(report) = summary.eval {
        print!("{}", report.metrics_table());
    }
    Ok(Outcome::Ok)
}

pub fn cmd_predict(model: &Path, image: &Path, out: &Path) -> Result<Outcome> {
    let model = load_model::<f32>(model)?;
    let mut x = load_image::<f32>(image)?;
    if model.config().in_channels == 3 {
        x = ensure_rgb(x)?;
    }
    let s = x.shape();
    let (h, w) = model.aligned_dims(s.h, s.w);
    let (padded, record) = pad_to(&x, h, w)?;
    let map = crop(&model.predict(&padded)?, &record)?;
    write_pnm(out, &probability_raster(&map)?)?;
    Ok(Outcome::Ok)
}

pub fn cmd_evaluate(
    model: &Path,
    manifest: &Path,
    dataset_name: &str,
    out: &Path,
) -> Result<Outcome> {
    let model = load_model::<f32>(model)?;
    let manifest = if manifest.is_dir() {
        mcunet::data::build_manifest(manifest, dataset_name)?
    } else {
        Manifest::load(manifest)?
    };
    if manifest.test.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let test_set = load_split(&manifest.test)?;
    let report = evaluate(&model, &test_set, 0.5)?;
    create_dir(out)?;
    write_eval(out, &report)?;
    print!("{}", report.metrics_table());
    Ok(Outcome::Ok)
}

/// The four `(use_dac, use_mkp)` rows, backbone first.
pub const ABLATION_ROWS: [(bool, bool); 4] =
    [(false, false), (true, false), (false, true), (true, true)];
pub const ABLATION_HEADER: &str = "dac,mkp,params,ACC,SEN,SP,AUC,F1,manifest_hash";

pub fn cmd_ablate(config: &Path, out: Option<PathBuf>) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let out = out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        Error::Config("no output directory: pass --out or set \"output_dir\"".into())
    })?;
    let manifest = cfg.manifest()?;
    create_dir(&out)?;
    let mut table = format!("{ABLATION_HEADER}\n");
    for (dac, mkp) in ABLATION_ROWS {
        let row = format!("dac={} mkp={}", u8::from(dac), u8::from(mkp));
        let mut row_cfg = cfg.clone();
        row_cfg.network = cfg
            .network
            .clone()
            .with_modules(cfg.network.use_sa, dac, mkp);
        let dir = out.join(format!("dac{}_mkp{}", u8::from(dac), u8::from(mkp)));
        let summary = run_training(&row_cfg, &manifest, &dir).map_err(|e| annotate(e, &row))?;
        let (m, auc) = match &summary.eval {
            Some(r) => (r.metrics, r.auc()),
            None => (Default::default(), None),
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{}",
            u8::from(dac),
            u8::from(mkp),
            summary.parameters,
            percent(m.acc),
            percent(m.se),
            percent(m.sp),
            percent(auc),
            percent(m.f1),
            summary.manifest_hash
        );
    }
    write_file(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(Outcome::Ok)
}

/// Prefixes the ablation row to an error while keeping its kind.
fn annotate(e: Error, row: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("ablation row {row}: {m}")),
        Error::Dataset(m) => Error::Dataset(format!("ablation row {row}: {m}")),
        Error::Checkpoint(m) => Error::Checkpoint(format!("ablation row {row}: {m}")),
        Error::Autodiff(m) => Error::Autodiff(format!("ablation row {row}: {m}")),
        Error::Diverged { step, detail } => Error::Diverged {
            step,
            detail: format!("ablation row {row}: {detail}"),
        },
        Error::Io { context, source } => Error::Io {
            context: format!("ablation row {row}: {context}"),
            source,
        },
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("ablation row {row}: {detail}"),
        },
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("ablation row {row}: {detail}"),
        },
        Error::UnsupportedFormat { path, detail } => Error::UnsupportedFormat {
            path,
            detail: format!("ablation row {row}: {detail}"),
        },
        Error::Malformed { path, detail } => Error::Malformed {
            path,
            detail: format!("ablation row {row}: {detail}"),
        },
    }
}

pub fn cmd_gradcheck(
    seed: u64,
    corrupt: Option<String>,
    filter: Option<String>,
) -> Result<Outcome> {
    let results = run_suite(&GradcheckOptions {
        seed,
        corrupt,
        filter,
    })?;
    print!("{}", format_report(&results));
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({})", r.name, r.precision))
        .collect();
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Failed(Failure(format!(
            "gradient check failed for {}",
            failed.join(", ")
        ))))
    }
}
