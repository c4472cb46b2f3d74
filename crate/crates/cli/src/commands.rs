use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neurocam::augment::augment_dataset;
use neurocam::explain::{guided_grad_cam, relevance_volume, render_strip, save_png, CamMode, ExplainError, Heatmap3D};
use neurocam::ggp::{self, evolution_csv, FitnessEvaluator, Grammar};
use neurocam::nn::{build_lenet5_modified, load_checkpoint, save_checkpoint, to_3d, ArchitectureSpec, Lenet5Config, Model, PoolDepth};
use neurocam::optim::{
    self, apply_tail, evaluate, format_result_row, history_csv, split_dataset, svm_grid_search, Dataset, Split,
    SplitKind, Splits, CLASS_NAMES,
};
use neurocam::phantom::{self, generate_phantom, write_phantom};
use neurocam::report::{peak_coordinates, region_voxel_counts, threshold_heatmap};
use neurocam::volio::{self, AtlasVolume, BrainMask, BrainVolume};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{ClassArg, Command, Common, DataArgs, EvalArgs, ExplainArgs, MapArgs, ModeArg, ModelArgs, ReportArgs, SplitArg};
use crate::{CliError, PhantomArgs, SearchArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const MANIFEST_FILE: &str = "run.json";
pub const SPLITS_FILE: &str = "splits.csv";
const RESULT_WIDTH: usize = 24;

/// Provenance record written next to every run's outputs. It has no
/// timestamps, so identical runs produce identical bytes.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub summary: BTreeMap<String, String>,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    summary: BTreeMap<String, String>,
}

impl Run {
    fn new(command: &'static str, out: &Path, seed: u64, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        })
    }

    fn input(&mut self, key: &str, path: &Path) {
        let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.inputs.insert(key.to_string(), abs.display().to_string());
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.out.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.outputs.push(MANIFEST_FILE.to_string());
        self.outputs.sort();
        self.outputs.dedup();
        let manifest = Manifest {
            command: self.command.to_string(),
            seed: self.seed,
            versions: BTreeMap::from([("neurocam".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
            inputs: self.inputs,
            config: self.config,
            outputs: self.outputs,
            summary: self.summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Svm(a) => svm_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn require_dir(path: &Path, flag: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(CliError::usage(
            format!("{flag} {} is not a directory", path.display()),
            format!("pass an existing dataset directory to {flag} (see `neurocam phantom`)"),
        ));
    }
    Ok(())
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if !path.is_file() {
        return Err(CliError::usage(
            format!("{flag} {} does not exist", path.display()),
            format!("pass an existing file to {flag}"),
        ));
    }
    Ok(())
}

fn load_data(data: &Path, mask: Option<&Path>) -> Result<(Dataset, PathBuf)> {
    require_dir(data, "--data")?;
    let mask = mask.map_or_else(|| data.join(phantom::MASK_FILE), Path::to_path_buf);
    require_file(&mask, "--mask")?;
    Ok((phantom::load_dataset(data, &mask)?, mask))
}

fn split_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::Train => "train",
        SplitKind::Validation => "val",
        SplitKind::Test => "test",
    }
}

fn splits_csv(splits: &Splits) -> String {
    let mut rows: Vec<(&str, &str)> = [&splits.train, &splits.val, &splits.test]
        .iter()
        .flat_map(|s| s.items.iter().map(|i| (i.id.as_str(), split_name(s.kind))))
        .collect();
    rows.sort();
    let mut out = String::from("subject_id,split\n");
    for (id, split) in rows {
        out.push_str(&format!("{id},{split}\n"));
    }
    out
}

fn read_split(model_dir: &Path, ds: &Dataset, which: SplitArg) -> Result<Split> {
    let (kind, name) = match which {
        SplitArg::Train => (SplitKind::Train, "train"),
        SplitArg::Val => (SplitKind::Validation, "val"),
        SplitArg::Test => (SplitKind::Test, "test"),
    };
    let path = model_dir.join(SPLITS_FILE);
    require_file(&path, "--model")?;
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if rec.get(1) == Some(name) {
            ids.push(rec[0].to_string());
        }
    }
    let items: Vec<_> = ds.items.iter().filter(|s| ids.contains(&s.id)).cloned().collect();
    if items.len() != ids.len() {
        return Err(CliError::Runtime(format!(
            "{} lists {} {name} subjects but the dataset has {} of them",
            path.display(),
            ids.len(),
            items.len()
        )));
    }
    Ok(Split { kind, items })
}

fn input_shape(ds: &Dataset) -> [usize; 3] {
    let [nx, ny, nz] = ds.mask.grid.dims;
    [nz, ny, nx]
}

fn build_spec(cfg: &RunConfig, ds: &Dataset) -> Result<(ArchitectureSpec, String)> {
    let (spec, name) = match &cfg.model.spec {
        Some(path) => {
            require_file(path, "[model] spec")?;
            let spec = ArchitectureSpec::from_toml(&std::fs::read_to_string(path)?)?;
            (spec, "Evolved CNN".to_string())
        }
        None => {
            let lenet = Lenet5Config {
                input_shape: input_shape(ds),
                filters: cfg.model.filters,
                kernel: cfg.model.kernel,
                fc_units: cfg.train.fc_units,
                dropout: cfg.train.effective_drop(),
            };
            let spec = apply_tail(&build_lenet5_modified(&lenet)?, &cfg.train)?;
            (spec, "Modified LeNet-5".to_string())
        }
    };
    if cfg.model.three_d {
        Ok((to_3d(&spec, PoolDepth::Preserve)?, format!("{name} (3D)")))
    } else {
        Ok((spec, format!("{name} (2D)")))
    }
}

fn phantom_cmd(a: PhantomArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (ds, truth) = generate_phantom(&cfg.phantom)?;
    let mut run = Run::new("phantom", &a.common.out, cfg.seed, &cfg.phantom)?;
    write_phantom(&a.common.out, &cfg.phantom, &ds, &truth)?;
    run.outputs.extend(ds.items.iter().map(|s| format!("subjects/{}.nii", s.id)));
    run.outputs.extend(
        [phantom::MANIFEST, phantom::MASK_FILE, phantom::ATLAS_FILE, phantom::ATLAS_LABELS, phantom::CONFIG_FILE]
            .map(String::from),
    );
    run.outputs.extend((0..2).map(phantom::truth_file));
    run.summary.insert("subjects".into(), ds.items.len().to_string());
    println!("wrote {} subjects to {}", ds.items.len(), a.common.out.display());
    run.finish()
}

fn train_cmd(a: DataArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (ds, mask_path) = load_data(&a.data, a.mask.as_deref())?;
    let (spec, name) = build_spec(&cfg, &ds)?;
    let splits = split_dataset(&ds, cfg.split, cfg.seed)?;
    let train_split = match &cfg.augment {
        Some(aug) => augment_dataset(&splits.train, &ds.mask, aug)?,
        None => splits.train.clone(),
    };
    let outcome = optim::train(&spec, &train_split, &splits.val, &cfg.train)?;
    let mut run = Run::new("train", &a.common.out, cfg.seed, &cfg)?;
    run.input("data", &a.data);
    run.input("mask", &mask_path);
    save_checkpoint(&outcome.model, &a.common.out)?;
    run.outputs.extend([neurocam::nn::SPEC_FILE, neurocam::nn::PARAMS_FILE].map(String::from));
    run.write("history.csv", history_csv(&outcome.history))?;
    run.write(SPLITS_FILE, splits_csv(&splits))?;
    run.summary.insert("model_name".into(), name.clone());
    run.summary.insert("params".into(), outcome.model.param_count().to_string());
    run.summary.insert("best_epoch".into(), outcome.best_epoch.to_string());
    if !splits.val.is_empty() {
        let acc = evaluate(&outcome.model, &splits.val)?;
        run.summary.insert("val_acc".into(), format!("{acc:.6}"));
        println!("{name}: {} parameters, best epoch {}, validation accuracy {:.2}%", outcome.model.param_count(), outcome.best_epoch, acc * 100.0);
    }
    run.finish()
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    let cfg = load_config(&a.data.common)?;
    let grammar = match &a.grammar {
        Some(path) => {
            require_file(path, "--grammar")?;
            Grammar::parse(&std::fs::read_to_string(path)?)
                .map_err(|e| CliError::usage(e.to_string(), "fix the grammar file"))?
        }
        None => Grammar::builtin(),
    };
    let (ds, mask_path) = load_data(&a.data.data, a.data.mask.as_deref())?;
    let splits = split_dataset(&ds, cfg.split, cfg.seed)?;
    let mut eval = FitnessEvaluator::new(&grammar, &splits.train, &splits.val, cfg.ggp.fitness_epochs, cfg.seed);
    eval.base = cfg.train.clone();
    let outcome = ggp::evolve(&mut eval, &cfg.ggp)?;
    let best = &outcome.best;
    let derived = ggp::derive_architecture(&best.genome, &grammar, &eval.input_shape)?;
    let tokens = ggp::derive_tokens(&best.genome, &grammar)?;

    let mut run = Run::new("search", &a.data.common.out, cfg.seed, &cfg)?;
    run.input("data", &a.data.data);
    run.input("mask", &mask_path);
    if let Some(g) = &a.grammar {
        run.input("grammar", g);
    }
    run.write("evolution.csv", evolution_csv(&outcome.log))?;
    let genome = serde_json::json!({
        "codons": best.genome.codons,
        "wraps": best.genome.wraps,
        "fitness": best.fitness,
        "program": tokens.join(" "),
        "learning_rate": derived.learning_rate,
        "epochs": derived.epochs,
    });
    run.write("best_genome.json", format!("{}\n", serde_json::to_string_pretty(&genome)?))?;
    run.write("best_spec.toml", derived.spec.to_toml())?;
    let mut best_cfg = RunConfig {
        seed: cfg.seed,
        split: cfg.split,
        train: derived.train_config(&cfg.train, derived.epochs),
        ..RunConfig::default()
    };
    best_cfg.model.spec = Some(PathBuf::from("best_spec.toml"));
    let best_toml = toml::to_string(&best_cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write("best_config.toml", best_toml)?;
    let mut failures = String::from("codons,reason\n");
    for f in &outcome.failures {
        let codons: Vec<String> = f.genome.codons.iter().map(u32::to_string).collect();
        failures.push_str(&format!("{},\"{}\"\n", codons.join(" "), f.reason.replace('"', "'")));
    }
    run.write("failures.csv", failures)?;
    run.summary.insert("best_fitness".into(), format!("{:.6}", best.fitness));
    run.summary.insert("trainings".into(), outcome.trainings.to_string());
    println!(
        "best validation accuracy {:.2}% after {} generations ({} trainings, {} invalid)",
        best.fitness * 100.0,
        cfg.ggp.generations,
        outcome.trainings,
        outcome.failures.len()
    );
    println!("{}", tokens.join(" "));
    run.finish()
}

fn svm_cmd(a: DataArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (ds, mask_path) = load_data(&a.data, a.mask.as_deref())?;
    let splits = split_dataset(&ds, cfg.split, cfg.seed)?;
    let (model, table) = svm_grid_search(&splits.train, &splits.val, &ds.mask, &cfg.svm.c, cfg.svm.epochs)?;
    let acc = evaluate(&model, &splits.test)?;
    let mut run = Run::new("svm", &a.common.out, cfg.seed, &cfg)?;
    run.input("data", &a.data);
    run.input("mask", &mask_path);
    let mut grid = String::from("c,val_acc\n");
    for (c, v) in &table {
        grid.push_str(&format!("{c},{v:.6}\n"));
    }
    run.write("svm_grid.csv", grid)?;
    run.write(SPLITS_FILE, splits_csv(&splits))?;
    run.write("eval.csv", format!("technique,split,accuracy\nLinear SVM,test,{acc:.6}\n"))?;
    run.summary.insert("c".into(), model.c.to_string());
    run.summary.insert("test_acc".into(), format!("{acc:.6}"));
    println!("{}", format_result_row("Linear SVM", acc, RESULT_WIDTH));
    run.finish()
}

struct Loaded {
    model: Model,
    manifest: Manifest,
    ds: Dataset,
    data_dir: PathBuf,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    require_dir(&a.model, "--model")?;
    let path = a.model.join(MANIFEST_FILE);
    require_file(&path, "--model")?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if manifest.command != "train" {
        return Err(CliError::usage(
            format!("{} was written by `{}`, not `train`", a.model.display(), manifest.command),
            "pass the output directory of `neurocam train` to --model",
        ));
    }
    let model = load_checkpoint(&a.model)?;
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => PathBuf::from(&manifest.inputs["data"]),
    };
    let mask = a.mask.clone().or_else(|| {
        a.data
            .is_none()
            .then(|| manifest.inputs.get("mask").map(PathBuf::from))
            .flatten()
    });
    let (ds, _) = load_data(&data_dir, mask.as_deref())?;
    Ok(Loaded {
        model,
        manifest,
        ds,
        data_dir,
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let loaded = load_model(&a.model)?;
    let split = read_split(&a.model.model, &loaded.ds, a.split)?;
    let acc = evaluate(&loaded.model, &split)?;
    let name = loaded
        .manifest
        .summary
        .get("model_name")
        .cloned()
        .unwrap_or_else(|| "CNN".to_string());
    println!("{}", format_result_row(&name, acc, RESULT_WIDTH));
    if let Some(out) = &a.out {
        let mut run = Run::new("eval", out, loaded.manifest.seed, &serde_json::json!({ "split": split_name(split.kind) }))?;
        run.input("model", &a.model.model);
        run.input("data", &loaded.data_dir);
        run.write(
            "eval.csv",
            format!("technique,split,accuracy\n{name},{},{acc:.6}\n", split_name(split.kind)),
        )?;
        run.finish()?;
    }
    Ok(())
}

fn cam_mode(model: &Model, mode: Option<ModeArg>) -> CamMode {
    match mode {
        Some(ModeArg::Replicate) => CamMode::Replicate,
        Some(ModeArg::Slicegrad) => CamMode::Slicegrad,
        Some(ModeArg::ThreeD) => CamMode::ThreeD,
        None if model.spec().is_3d() => CamMode::ThreeD,
        None => CamMode::Slicegrad,
    }
}

fn heatmap(model: &Model, volume: &BrainVolume, class: usize, mode: CamMode, guided: bool, mask: &BrainMask) -> Result<Heatmap3D> {
    let h = if guided {
        guided_grad_cam(model, volume, class, mode)
    } else {
        relevance_volume(model, volume, class, mode)
    };
    let h = h.map_err(|e| match e {
        ExplainError::ModeRankMismatch { .. } => {
            CliError::usage(e.to_string(), "use --mode 3d for 3D models and replicate or slicegrad for 2D models")
        }
        other => other.into(),
    })?;
    Ok(h.masked(mask)?)
}

fn load_atlas_for(map: &MapArgs, data_dir: &Path) -> Result<(AtlasVolume, PathBuf)> {
    let path = map.atlas.clone().unwrap_or_else(|| data_dir.join(phantom::ATLAS_FILE));
    require_file(&path, "--atlas")?;
    let labels = path.with_file_name(phantom::ATLAS_LABELS);
    require_file(&labels, "--atlas (label table beside it)")?;
    let atlas = volio::load_atlas(&std::fs::read(&path)?, &std::fs::read_to_string(&labels)?)?;
    Ok((atlas, path))
}

/// Evenly spaced axial slices through the mask's z extent.
fn strip_slices(mask: &BrainMask, count: usize) -> Vec<usize> {
    let zs: Vec<usize> = mask.indices().iter().map(|&i| mask.grid.coords(i)[2]).collect();
    let (lo, hi) = (zs.iter().min().copied().unwrap_or(0), zs.iter().max().copied().unwrap_or(0));
    (0..count).map(|k| lo + (hi - lo) * (2 * k + 1) / (2 * count)).collect()
}

/// Writes heatmap, threshold mask, region and peak tables, and a PNG strip
/// for one map; returns the region table text.
fn write_map(run: &mut Run, map: &MapArgs, h: &Heatmap3D, tag: &str, background: &BrainVolume, mask: &BrainMask, atlas: &AtlasVolume) -> Result<String> {
    let thr = threshold_heatmap(h, mask, map.topq).map_err(|e| match e {
        neurocam::report::ReportError::InvalidFraction(q) => {
            CliError::usage(format!("--topq {q} is outside (0, 1]"), "pass a fraction such as 0.05")
        }
        other => other.into(),
    })?;
    let regions = region_voxel_counts(&thr, atlas)?;
    let peaks = peak_coordinates(h, atlas, map.peaks, tag)?;
    let name = |base: &str, ext: &str| format!("{base}_{tag}.{ext}");
    run.write(&name("heatmap", "nii"), volio::write_nifti(&h.to_volume()))?;
    run.write(&name("threshold", "nii"), volio::write_nifti(&thr.to_volume()))?;
    run.write(&name("regions", "csv"), regions.to_csv())?;
    run.write(&name("peaks", "csv"), peaks.to_csv())?;
    let img = render_strip(h, Some(background), &strip_slices(mask, 8), 0.2)?;
    save_png(&img, &run.out.join(name("heatmap", "png")))?;
    run.outputs.push(name("heatmap", "png"));
    Ok(regions.to_table())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let loaded = load_model(&a.map.model)?;
    let subject = loaded.ds.items.iter().find(|s| s.id == a.subject).ok_or_else(|| {
        CliError::usage(
            format!("subject {:?} is not in {}", a.subject, loaded.data_dir.display()),
            "use a subject_id from the dataset's manifest.csv",
        )
    })?;
    let class = a.class.map_or(subject.label, ClassArg::index);
    let mode = cam_mode(&loaded.model, a.map.mode);
    let (atlas, atlas_path) = load_atlas_for(&a.map, &loaded.data_dir)?;
    let h = heatmap(&loaded.model, &subject.volume, class, mode, a.map.guided, &loaded.ds.mask)?;
    let config = serde_json::json!({
        "subject": a.subject,
        "class": CLASS_NAMES[class],
        "mode": mode.to_string(),
        "guided": a.map.guided,
        "topq": a.map.topq,
    });
    let mut run = Run::new("explain", &a.map.out, loaded.manifest.seed, &config)?;
    run.input("model", &a.map.model.model);
    run.input("data", &loaded.data_dir);
    run.input("atlas", &atlas_path);
    let table = write_map(&mut run, &a.map, &h, &a.subject, &subject.volume, &loaded.ds.mask, &atlas)?;
    run.summary.insert("source_mode".into(), h.source_mode.name().into());
    println!("{} relevance for {} ({}):", CLASS_NAMES[class], a.subject, h.source_mode.name());
    print!("{table}");
    run.finish()
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let loaded = load_model(&a.map.model)?;
    let split = read_split(&a.map.model.model, &loaded.ds, a.split)?;
    let mode = cam_mode(&loaded.model, a.map.mode);
    let (atlas, atlas_path) = load_atlas_for(&a.map, &loaded.data_dir)?;
    let config = serde_json::json!({
        "split": split_name(split.kind),
        "mode": mode.to_string(),
        "guided": a.map.guided,
        "topq": a.map.topq,
    });
    let mut run = Run::new("report", &a.map.out, loaded.manifest.seed, &config)?;
    run.input("model", &a.map.model.model);
    run.input("data", &loaded.data_dir);
    run.input("atlas", &atlas_path);
    let mask = &loaded.ds.mask;
    for (class, class_name) in CLASS_NAMES.iter().enumerate() {
        let members: Vec<_> = split.items.iter().filter(|s| s.label == class).collect();
        if members.is_empty() {
            eprintln!("warning: no {class_name} subjects in the {} split", split_name(split.kind));
            continue;
        }
        let mut sum = vec![0.0f64; mask.grid.len()];
        let mut mean_volume = vec![0.0f32; mask.grid.len()];
        let mut source = None;
        for s in &members {
            let h = heatmap(&loaded.model, &s.volume, class, mode, a.map.guided, mask)?;
            sum.iter_mut().zip(&h.data).for_each(|(acc, &v)| *acc += v as f64);
            mean_volume
                .iter_mut()
                .zip(s.volume.data())
                .for_each(|(acc, &v)| *acc += v / members.len() as f32);
            source = Some(h.source_mode);
        }
        let h = Heatmap3D::normalized(mask.grid.clone(), &sum, class, source.expect("nonempty class"))?;
        if h.max() <= 0.0 {
            eprintln!("warning: {class_name} relevance is zero everywhere; no tables written");
            continue;
        }
        let background = BrainVolume::new(mask.grid.clone(), mean_volume)?;
        let table = write_map(&mut run, &a.map, &h, class_name, &background, mask, &atlas)?;
        println!("{class_name} ({} subjects):", members.len());
        print!("{table}");
        run.summary.insert(format!("{class_name}_subjects"), members.len().to_string());
    }
    run.finish()
}
