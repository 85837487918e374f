use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diver_core::checkpoint::{Checkpoint, HeadSpec};
use diver_core::model::{BlockKind, InitMode, Model, ModelConfig, PositionalKind};
use diver_core::signal::io::{load_recording, save_drf};
use diver_core::signal::{preprocess, PatchGrid};
use diver_core::synth::{corpus, index_entries};
use diver_core::train::{finetune, load_labeled, pretrain_with, summarize, write_index, FinetuneRun};
use diver_core::verify::{run_suite, Ablation, VerifyConfig};
use diver_core::Tensor;

use crate::settings::{invalid, manifest, write_out, Section, Settings};

pub struct Common<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub set: &'a [String],
    pub out: Option<&'a Path>,
}

impl Common<'_> {
    fn settings(&self, model: ModelConfig) -> Result<Settings> {
        Settings::resolve(self.config, self.set, model)
    }

    fn out(&self) -> Result<&Path> {
        self.out.ok_or_else(|| invalid(anyhow::anyhow!("--out <dir> is required")))
    }
}

/// `input` itself, or the files in it with one of `exts`, sorted.
fn recording_files(input: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(invalid(anyhow::anyhow!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(anyhow::anyhow!("no {} files in {}", exts.join("/"), input.display())));
    }
    Ok(files)
}

pub fn preprocess_cmd(c: &Common, input: &Path, flags: &[String]) -> Result<()> {
    let mut set = flags.to_vec();
    set.extend_from_slice(c.set);
    let s = Settings::resolve(c.config, &set, ModelConfig::default())?;
    s.prep.validate()?;
    let out = c.out()?;
    let files = recording_files(input, &["drf", "csv"])?;

    let mut windows = Vec::new();
    let mut dropped = 0;
    for f in &files {
        let rec = load_recording(f).with_context(|| format!("reading {}", f.display()))?;
        let expected = (rec.duration_s() / s.prep.segment.patches_per_window as f64).floor() as usize;
        let grids = preprocess(&rec, &s.prep).with_context(|| format!("preprocessing {}", f.display()))?;
        dropped += expected.saturating_sub(grids.len());
        windows.extend(grids);
    }

    fs::create_dir_all(out)?;
    let mut list = String::from("file,recording,start_s\n");
    for g in &windows {
        let k = (g.start_s / s.prep.segment.patches_per_window as f64).round() as usize;
        let name = format!("{}.w{k:03}", g.recording_id);
        save_drf(&g.to_recording(name.as_str())?, &out.join(format!("{name}.drf")))?;
        writeln!(list, "{name}.drf,{},{}", g.recording_id, g.start_s)?;
    }
    write_out(out, "windows.csv", list)?;
    write_out(
        out,
        "manifest.txt",
        manifest("preprocess", &[("in", input)], &s, &[Section::Prep]),
    )?;
    println!(
        "{} recordings -> {} windows ({} rejected) in {}",
        files.len(),
        windows.len(),
        dropped,
        out.display()
    );
    Ok(())
}

pub fn synth_cmd(c: &Common) -> Result<()> {
    let mut s = c.settings(ModelConfig::default())?;
    if let Some(seed) = c.seed {
        s.synth.seed = seed;
    }
    s.synth.validate()?;
    let out = c.out()?;
    let recs = corpus(&s.synth)?;
    fs::create_dir_all(out)?;
    for r in &recs {
        save_drf(r, &out.join(format!("{}.drf", r.id)))?;
    }
    if s.synth.classes > 0 {
        write_index(&out.join("index.csv"), &index_entries(&s.synth))?;
    }
    write_out(out, "manifest.txt", manifest("synth", &[], &s, &[Section::Synth]))?;
    println!("{} recordings in {}", recs.len(), out.display());
    Ok(())
}

/// Reject data the configured architecture cannot take, before any
/// output is written.
fn check_grids(cfg: &ModelConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Result<()> {
    let mut counts = std::collections::BTreeSet::new();
    for (ch, n) in shapes {
        if n > cfg.max_patches {
            return Err(invalid(anyhow::anyhow!("{n} patches per window exceed max_patches {}", cfg.max_patches)));
        }
        counts.insert(ch);
    }
    if cfg.positional == PositionalKind::Acpe && counts.iter().any(|&ch| ch != cfg.acpe_channels) {
        return Err(invalid(anyhow::anyhow!(
            "positional = acpe needs every window to have acpe_channels = {} channels, data has {counts:?}",
            cfg.acpe_channels
        )));
    }
    if cfg.block == BlockKind::Vanilla && counts.iter().any(|&ch| ch > cfg.max_channels) {
        return Err(invalid(anyhow::anyhow!("vanilla blocks support at most max_channels = {}", cfg.max_channels)));
    }
    Ok(())
}

fn load_windows(dir: &Path) -> Result<Vec<Tensor>> {
    let files = recording_files(dir, &["drf"])?;
    files
        .iter()
        .map(|f| {
            let rec = load_recording(f).with_context(|| format!("reading {}", f.display()))?;
            Ok(PatchGrid::from_recording(&rec).map_err(invalid)?.patches)
        })
        .collect()
}

pub fn pretrain_cmd(c: &Common, data: &Path) -> Result<()> {
    let mut s = c.settings(ModelConfig::default())?;
    if let Some(seed) = c.seed {
        s.pretrain.seed = seed;
    }
    s.model.validate()?;
    s.pretrain.validate()?;
    let out = c.out()?;
    let grids = load_windows(data)?;
    check_grids(&s.model, grids.iter().map(|g| (g.shape()[0], g.shape()[1])))?;

    let mut model = Model::new(&s.model, s.pretrain.seed, true, None)?;
    let steps = s.pretrain.steps;
    let report = pretrain_with(&mut model, &grids, &s.pretrain, |step, loss| {
        if step % 10 == 0 || step + 1 == steps {
            eprintln!("step {step:>5}  loss {loss:.6}");
        }
    })?;

    let mut log = String::from("step\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(log, "{i}\t{l:.9e}")?;
    }
    write_out(out, "loss.tsv", log)?;
    let mut buf = Vec::new();
    Checkpoint::from_model(&model, s.run.precision).write(&mut buf)?;
    write_out(out, "model.dcp", buf)?;
    write_out(
        out,
        "manifest.txt",
        manifest(
            "pretrain",
            &[("data", data)],
            &s,
            &[Section::Model, Section::Pretrain, Section::Run],
        ),
    )?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("loss {first:.6} -> {last:.6} over {steps} steps");
    }
    Ok(())
}

pub fn finetune_cmd(c: &Common, index: &Path, init: Option<&Path>) -> Result<()> {
    let base = match init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let start = match &base {
        Some(ck) => ck.config()?.0,
        None => ModelConfig::default(),
    };
    let mut s = c.settings(start)?;
    if let Some(seed) = c.seed {
        s.finetune.seeds = vec![seed];
    }
    s.model.validate()?;
    s.prep.validate()?;
    s.finetune.validate()?;
    let out = c.out()?;
    if !index.is_file() {
        return Err(invalid(anyhow::anyhow!("index {} does not exist", index.display())));
    }
    let data = load_labeled(index, &s.prep)?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(invalid(anyhow::anyhow!("the index needs both train and test windows")));
    }
    let shapes = data.train.grids.iter().chain(&data.test.grids).map(|g| (g.shape()[0], g.shape()[1]));
    check_grids(&s.model, shapes)?;
    diver_core::train::check_class_coverage(&data.train)?;
    let pretrained = base.as_ref().map(|ck| ck.to_model()).transpose()?;

    let mut runs: Vec<FinetuneRun> = Vec::new();
    let mut checkpoints = Vec::new();
    for &seed in &s.finetune.seeds {
        let mut model = Model::new(&s.model, seed, false, Some(data.train.classes))?;
        if let Some(p) = &pretrained {
            let n = model.load_matching(&p.store);
            eprintln!("seed {seed}: {n} parameters loaded from the checkpoint");
        }
        let run = finetune(&mut model, &data.train, &data.test, &s.finetune, seed)?;
        eprintln!(
            "seed {seed}: balanced accuracy {:.2}",
            run.eval.metrics.balanced_accuracy
        );
        let mut buf = Vec::new();
        Checkpoint::from_model(&model, s.run.precision).write(&mut buf)?;
        checkpoints.push((format!("model-s{seed}.dcp"), buf));
        runs.push(run);
    }

    let mut log = String::from("seed\tepoch\tloss\n");
    for r in &runs {
        for (e, l) in r.epoch_losses.iter().enumerate() {
            writeln!(log, "{}\t{e}\t{l:.9e}", r.seed)?;
        }
    }
    let report = metrics_report(&runs, data.dropped)?;
    write_out(out, "loss.tsv", log)?;
    write_out(out, "report.tsv", &report)?;
    for (name, buf) in checkpoints {
        write_out(out, &name, buf)?;
    }
    let mut inputs = vec![("index", index)];
    if let Some(p) = init {
        inputs.push(("init", p));
    }
    write_out(
        out,
        "manifest.txt",
        manifest(
            "finetune",
            &inputs,
            &s,
            &[Section::Model, Section::Prep, Section::Finetune, Section::Run],
        ),
    )?;
    print!("{report}");
    Ok(())
}

/// One row per seed, then mean ± std per metric.
pub fn metrics_report(runs: &[FinetuneRun], dropped: usize) -> Result<String> {
    let mut r = String::from("seed\tbalanced_accuracy\tkappa\tweighted_f1\n");
    for run in runs {
        let m = &run.eval.metrics;
        writeln!(r, "{}\t{:.2}\t{:.2}\t{:.2}", run.seed, m.balanced_accuracy, m.kappa, m.weighted_f1)?;
    }
    let all: Vec<_> = runs.iter().map(|r| r.eval.metrics).collect();
    let sum = summarize(&all)?;
    writeln!(
        r,
        "mean ± std\t{}\t{}\t{}",
        sum.balanced_accuracy, sum.kappa, sum.weighted_f1
    )?;
    if dropped > 0 {
        writeln!(r, "# {dropped} indexed windows were rejected during preprocessing")?;
    }
    Ok(r)
}

pub fn verify_cmd(c: &Common, ckpt: Option<&Path>, ablations: &[String], quick: bool) -> Result<bool> {
    let loaded = match ckpt {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    if loaded.is_some() && !ablations.is_empty() {
        return Err(invalid(anyhow::anyhow!("--ablation applies to a fresh model, not a checkpoint")));
    }
    let base = Settings {
        verify: if quick { VerifyConfig::quick() } else { VerifyConfig::default() },
        ..Settings::default()
    };
    let mut s = Settings::resolve_from(c.config, c.set, base)?;
    if let Some(seed) = c.seed {
        s.verify.seed = seed;
    }
    s.verify.validate()?;
    let model = match &loaded {
        Some(ck) => ck.to_model()?,
        None => {
            for a in ablations {
                s.model = a.parse::<Ablation>()?.apply(&s.model);
            }
            // Standard init zeroes several paths, which would make
            // symmetry checks pass vacuously.
            if !s.was_given("init") {
                s.model.init = InitMode::Dense;
            }
            s.model.validate()?;
            Model::new(&s.model, s.verify.seed, false, Some(2))?
        }
    };
    let report = run_suite(&model, &s.verify)?;
    println!("{report}");
    if let Some(out) = c.out {
        write_out(out, "report.txt", format!("{report}\n"))?;
        let mut inputs = Vec::new();
        if let Some(p) = ckpt {
            inputs.push(("checkpoint", p));
        }
        write_out(
            out,
            "manifest.txt",
            manifest("verify", &inputs, &s, &[Section::Model, Section::Verify]),
        )?;
    }
    Ok(report.ok())
}

pub fn inspect_cmd(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (cfg, heads) = ck.config()?;
    let HeadSpec { recon, classes } = heads;
    println!("format: DCP version {}", ck.version);
    println!(
        "model: d_model={} heads={} depth={} block={} positional={}",
        cfg.d_model, cfg.heads, cfg.depth, cfg.block, cfg.positional
    );
    println!("heads: reconstruction={recon} classes={classes}");
    println!("{:<40} {:>5} {:>16} {:>9} {:>12}", "parameter", "dtype", "shape", "numel", "rms");
    let mut total = 0;
    for e in &ck.entries {
        let n = e.value.numel();
        total += n;
        let rms = (e.value.data().iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        println!(
            "{:<40} {:>5} {:>16} {:>9} {:>12.4e}",
            e.name,
            e.precision.to_string(),
            format!("{:?}", e.value.shape()),
            n,
            rms
        );
    }
    println!("{} tensors, {total} parameters", ck.entries.len());
    if total == 0 {
        bail!("checkpoint holds no parameters");
    }
    Ok(())
}
