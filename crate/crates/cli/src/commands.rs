use std::path::{Path, PathBuf};

use advart::detector::{
    load_detector, save_detector, synth_dataset, train_toy_detector, Detector, GridDetector, Scene, Split, TrainConfig,
};
use advart::eval::{map_eval, sweep_csv, PatchSpec, SweepGrid};
use advart::imaging::{load_image, save_image, ssim as ssim_of, ImageRGB};
use advart::losses::SimMetric;
use advart::optimize::{craft_from, decode_snapshot, encode_snapshot, history_row, CraftState, HISTORY_HEADER};
use advart::patchops::{EotConfig, PatchCanvas};
use advart::Error;

use crate::adapter::{ExternalDetector, ADAPTER_PREFIX};
use crate::config::{load_artwork, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{load_scenes, write_dataset};
use crate::{CraftArgs, EvalArgs, RunOverrides, SsimArgs, SweepArgs, SynthArgs, TrainArgs};

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn synth_data(a: SynthArgs) -> CliResult<()> {
    let scenes = synth_dataset(a.seed, a.count, (a.size, a.size))?;
    if a.out.exists() {
        let mut entries = std::fs::read_dir(&a.out).map_err(|e| CliError::io(&a.out, e))?;
        if entries.next().is_some() {
            if !a.force {
                return Err(CliError::Usage(format!(
                    "{} is not empty (pass --force to overwrite)",
                    a.out.display()
                )));
            }
            let images = a.out.join("images");
            if images.exists() {
                std::fs::remove_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
            }
        }
    }
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), manifest.display());
    Ok(())
}

fn default_curve_path(out: &Path) -> PathBuf {
    out.with_extension("curve.csv")
}

pub fn train_detector(a: TrainArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let curve_path = a.curve.unwrap_or_else(|| default_curve_path(&a.out));
    match train_toy_detector(&scenes, &cfg) {
        Ok((model, curve)) => {
            save_detector(&model, &a.out)?;
            write_file(&curve_path, curve.to_csv())?;
            let best = curve.best().expect("training ran at least one epoch");
            println!("val mAP: {:.2} (epoch {})", best.val_map, best.epoch);
            println!("checkpoint: {}", a.out.display());
            println!("curve: {}", curve_path.display());
            Ok(())
        }
        Err(Error::TrainingFailed { best_map, required, curve }) => {
            write_file(&curve_path, curve.to_csv())?;
            Err(Error::TrainingFailed { best_map, required, curve }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// A detector that can be differentiated through.
fn grid_detector(spec: &str, data: &[Scene], seed: u64) -> CliResult<GridDetector> {
    if spec.starts_with(ADAPTER_PREFIX) {
        return Err(CliError::Usage(format!(
            "{spec}: external detectors give no gradients and can only be evaluated"
        )));
    }
    if spec == "toy" {
        eprintln!("training a toy detector on the dataset");
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        return Ok(train_toy_detector(data, &cfg)?.0);
    }
    Ok(load_detector(spec)?)
}

fn any_detector(spec: &str) -> CliResult<Box<dyn Detector>> {
    match ExternalDetector::parse(spec) {
        Some(ext) => Ok(Box::new(ext)),
        None if spec.starts_with(ADAPTER_PREFIX) => Err(CliError::Usage(format!("{spec}: no program given"))),
        None => Ok(Box::new(load_detector(spec)?)),
    }
}

fn run_config(o: &RunOverrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.detector {
        cfg.detector = Some(v.clone());
    }
    if let Some(v) = &o.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &o.artwork {
        cfg.artwork = Some(v.clone());
    }
    if let Some(v) = &o.init {
        cfg.init = Some(v.clone());
    }
    if let Some(v) = o.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = o.ratio {
        cfg.ratio = v;
    }
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.beta {
        cfg.beta = v;
    }
    if let Some(v) = o.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = &o.sim_metric {
        cfg.sim_metric = v.clone();
    }
    if let Some(v) = &o.eot {
        cfg.eot.set_subset(&EotConfig::from_subset(v)?);
    }
    if let Some(v) = o.iters {
        cfg.iters = v;
    }
    if let Some(v) = o.batch {
        cfg.batch = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = &o.out {
        cfg.out = Some(v.clone());
    }
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Rows of an existing history CSV, checked to cover iterations `0..n` exactly.
fn resumed_history(path: &Path, n: usize) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(CliError::Usage(format!("{}: not a crafting history", path.display())));
    }
    let rows: Vec<String> = lines
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < n)
        })
        .map(str::to_string)
        .collect();
    let contiguous = rows
        .iter()
        .enumerate()
        .all(|(k, l)| l.split(',').next() == Some(k.to_string().as_str()));
    if rows.len() != n || !contiguous {
        return Err(CliError::Usage(format!(
            "{}: history does not cover the {n} iterations of the snapshot",
            path.display()
        )));
    }
    Ok(rows)
}

struct Artifacts {
    bin: PathBuf,
    png: PathBuf,
    csv: PathBuf,
}

impl Artifacts {
    fn in_dir(dir: &Path) -> Self {
        Self {
            bin: dir.join("patch.bin"),
            png: dir.join("patch.png"),
            csv: dir.join("history.csv"),
        }
    }

    fn write(&self, state: &CraftState, rows: &[String]) -> advart::Result<()> {
        std::fs::write(&self.bin, encode_snapshot(state)).map_err(|e| io_err(&self.bin, e))?;
        save_image(&ImageRGB::from_chw(&state.pixels)?, &self.png)?;
        let mut csv = String::with_capacity(64 * (rows.len() + 1));
        csv.push_str(HISTORY_HEADER);
        csv.push('\n');
        for r in rows {
            csv.push_str(r);
            csv.push('\n');
        }
        std::fs::write(&self.csv, csv).map_err(|e| io_err(&self.csv, e))
    }
}

pub fn craft(a: CraftArgs) -> CliResult<()> {
    let cfg = run_config(&a.run)?;
    cfg.validate_for_craft()?;
    let craft_cfg = cfg.craft_config()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("advart-run"));
    create_dir(&out)?;
    let files = Artifacts::in_dir(&out);

    let data = load_scenes(cfg.data.as_ref().expect("validated"))?;
    let model = grid_detector(cfg.detector.as_deref().expect("validated"), &data, cfg.seed)?;
    let target = cfg.artwork_image()?;
    let canvas = PatchCanvas::init(target.as_ref(), cfg.patch_size, cfg.init_mode()?)?;

    let (state, mut rows) = if a.resume {
        let bytes = std::fs::read(&files.bin).map_err(|e| CliError::io(&files.bin, e))?;
        let state = decode_snapshot(&bytes)?;
        let rows = resumed_history(&files.csv, state.iteration)?;
        eprintln!("resuming at iteration {}", state.iteration);
        (state, rows)
    } else {
        (CraftState::start(&canvas, &craft_cfg), Vec::new())
    };
    if state.patch_size() != cfg.patch_size {
        return Err(CliError::Usage(format!(
            "snapshot patch side {} differs from the configured {}",
            state.patch_size(),
            cfg.patch_size
        )));
    }

    let every = cfg.snapshot_every;
    let total = craft_cfg.iterations;
    let run = craft_from(&model, &data, canvas, state, &craft_cfg, &mut |st, rec| {
        rows.push(history_row(rec));
        if let Some(m) = rec.map_probe {
            eprintln!("iteration {:>5}: loss {:.4}, probe mAP {m:.2}", rec.iteration, rec.loss.total);
        }
        if every > 0 && st.iteration % every == 0 && st.iteration < total {
            files.write(st, &rows)?;
        }
        Ok(())
    })?;
    files.write(&run.state, &rows)?;

    println!("iterations: {}", run.state.iteration);
    if let Some(last) = run.history.last() {
        println!("final loss: {:.6}", last.loss.total);
    }
    if let Some(m) = run.history.iter().rev().find_map(|r| r.map_probe) {
        println!("probe mAP: {m:.2}");
    }
    if let Some(t) = run.patch.target_image() {
        println!("ssim: {:.4}", ssim_of(&run.patch.to_image(), &t)?);
    }
    println!("artifacts: {}", out.display());
    Ok(())
}

/// Reads a patch from an ADVART-PATCH v1 snapshot or an image file.
fn load_patch(path: &Path, target: Option<&ImageRGB>) -> CliResult<PatchCanvas> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let pixels = if bytes.starts_with(advart::optimize::PATCH_MAGIC) {
        decode_snapshot(&bytes)?.pixels
    } else {
        load_image(path)?.to_chw()
    };
    Ok(PatchCanvas::from_pixels(pixels, target)?)
}

fn select_split(scenes: Vec<Scene>, split: &str) -> CliResult<Vec<Scene>> {
    let keep: Option<Split> = match split {
        "all" => None,
        s => Some(Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split {s:?}")))?),
    };
    let out: Vec<Scene> = scenes.into_iter().filter(|s| keep.map_or(true, |k| s.split == k)).collect();
    if out.is_empty() {
        return Err(CliError::Usage(format!("no scenes in split {split:?}")));
    }
    Ok(out)
}

pub const EVAL_HEADER: &str = "patch,ratio,eval_eot,map,asr,ssim";

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let detector = any_detector(&a.detector)?;
    let scenes = select_split(load_scenes(&a.data)?, &a.split)?;
    let target = a.artwork.as_deref().map(load_artwork).transpose()?;
    let eval_eot = a.eval_eot.as_deref().map(EotConfig::from_subset).transpose()?;
    let canvas = a.patch.as_deref().map(|p| load_patch(p, target.as_ref())).transpose()?;
    let spec = canvas.as_ref().map(|c| PatchSpec {
        patch: c,
        ratio: a.ratio,
        eot: eval_eot.map(|e| (e, a.seed)),
    });
    let report = map_eval(detector.as_ref(), &scenes, spec.as_ref())?;
    let patch_name = a.patch.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
    let csv = format!(
        "{EVAL_HEADER}\n{},{},{},{},{},{}\n",
        patch_name.replace(',', "_"),
        a.ratio,
        eval_eot.map_or_else(|| "none".to_string(), |e| e.subset_name()),
        report.map,
        report.asr,
        report.ssim.map(|v| v.to_string()).unwrap_or_default()
    );
    write_file(&a.out, csv)?;
    print!("{}", report.summary());
    Ok(())
}

fn split_values(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).collect()
}

/// Builds the grid from `key=v1,v2` axes; unlisted axes take the config value.
fn parse_grid(specs: &[String], cfg: &RunConfig, eval_eot: Option<(EotConfig, u64)>) -> CliResult<SweepGrid> {
    let mut grid = SweepGrid {
        ratios: vec![cfg.ratio],
        metrics: vec![cfg.metric()?],
        betas: vec![cfg.beta],
        eots: vec![cfg.eot.to_config()],
        artworks: Vec::new(),
        eval_eot,
    };
    let mut artworks: Option<Vec<String>> = cfg.artwork.clone().map(|a| vec![a]);
    let bad = |axis: &str, v: &str| CliError::Usage(format!("grid axis {axis}: cannot parse {v:?}"));
    for axis in specs.iter().flat_map(|s| s.split(';')).map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("grid axis {axis:?} is not key=v1,v2")))?;
        let values = split_values(values);
        match key.trim() {
            "ratio" => {
                grid.ratios = values.iter().map(|v| v.parse().map_err(|_| bad(key, v))).collect::<CliResult<_>>()?
            }
            "beta" => {
                grid.betas = values.iter().map(|v| v.parse().map_err(|_| bad(key, v))).collect::<CliResult<_>>()?
            }
            "metric" | "sim_metric" => {
                grid.metrics = values.iter().map(|v| v.parse::<SimMetric>()).collect::<advart::Result<_>>()?
            }
            "eot" => {
                let ranges = cfg.eot.to_config().ranges;
                grid.eots = values
                    .iter()
                    .map(|v| EotConfig::from_subset(v).map(|e| EotConfig { ranges, ..e }))
                    .collect::<advart::Result<_>>()?
            }
            "artwork" => artworks = Some(values.iter().map(|v| v.to_string()).collect()),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown grid axis {other:?} (expected ratio, metric, beta, eot or artwork)"
                )))
            }
        }
    }
    match artworks {
        Some(names) => {
            for n in names {
                let img = load_artwork(&n)?;
                grid.artworks.push((n, img));
            }
        }
        None => {
            if grid.betas.iter().any(|&b| b > 0.0) {
                return Err(CliError::Usage("beta > 0 needs a target artwork".into()));
            }
            grid.artworks.push(("none".into(), ImageRGB::filled(cfg.patch_size, cfg.patch_size, [0.5; 3])));
        }
    }
    Ok(grid)
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let cfg = run_config(&a.run)?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset manifest: set \"data\" or pass --data".into()))?;
    let det_spec = cfg
        .detector
        .clone()
        .ok_or_else(|| CliError::Usage("no detector: set \"detector\" or pass --detector".into()))?;
    let base = cfg.craft_config()?;
    let eval_eot = a.eval_eot.as_deref().map(EotConfig::from_subset).transpose()?;
    let grid = parse_grid(&a.grid, &cfg, eval_eot.map(|e| (e, cfg.seed)))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let data = load_scenes(&data_path)?;
    let model = grid_detector(&det_spec, &data, cfg.seed)?;
    let rows = advart::eval::sweep(&model, &data, &base, cfg.patch_size, cfg.init_mode()?, &grid)?;
    let csv = sweep_csv(&rows, eval_eot.as_ref());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn ssim(a: SsimArgs) -> CliResult<()> {
    let x = load_image(&a.a)?;
    let y = load_image(&a.b)?;
    println!("{}", ssim_of(&x, &y)?);
    Ok(())
}
