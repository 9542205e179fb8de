//! Subcommand implementations behind the `nlcen` binary. Each command
//! writes its artifacts into the output directory together with
//! `manifest.txt`, a list of `sha256  relative/path` lines.

use std::fs;
use std::path::{Path, PathBuf};

use nlcen_tensor::{checkpoint, ParamStore};
use sha2::{Digest, Sha256};

use crate::attack::{sweep, sweep_csv, AttackTarget, Segmenter, SweepRow};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{batch_tensor, load_dataset, save_dataset, synth_generate, SampleRecord, Split, SyntheticKind};
use crate::error::{io_err, Error, Result};
use crate::metrics::{confusion, dic, jsc};
use crate::segnet::{is_base_param, ModelConfig, Nlcen, Variant};
use crate::train::{log_csv, train, EpochLog, TrainMode};

pub const MANIFEST: &str = "manifest.txt";

/// A dataset together with what the model needs to know about it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    pub kind: Option<SyntheticKind>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<SampleRecord> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    fn shape(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
        if let Some(s) = self
            .samples
            .iter()
            .find(|s| (s.image.channels, s.image.height, s.image.width) != (c, h, w))
        {
            return Err(Error::Dataset(format!("{} differs in size from {}", s.id, first.id)));
        }
        if h != w {
            return Err(Error::Dataset(format!("images must be square, got {h}x{w}")));
        }
        Ok((c, h))
    }

    /// Augmentation follows the data kind: on for RGB lesion-like data.
    fn kind_for_training(&self) -> Option<SyntheticKind> {
        self.kind.or_else(|| match self.samples.first() {
            Some(s) if s.image.channels == 3 => Some(SyntheticKind::Lesion),
            _ => None,
        })
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(s) => Ok(Dataset {
            samples: synth_generate(s)?,
            kind: Some(s.kind),
        }),
        DataSource::Directory(dir) => Ok(Dataset {
            samples: load_dataset(dir)?,
            kind: None,
        }),
    }
}

/// Model configuration for `variant` on images of this dataset.
pub fn model_config(cfg: &ExperimentConfig, data: &Dataset, variant: Variant) -> Result<ModelConfig> {
    let (channels, side) = data.shape()?;
    Ok(ModelConfig {
        in_channels: channels,
        input_hw: side,
        variant,
        ..cfg.model.clone()
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path.strip_prefix(root).expect("under root").to_owned());
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) into
/// `dir/manifest.txt`, sorted by path.
pub fn write_manifest(dir: &Path) -> Result<PathBuf> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for f in &files {
        let rel = f.to_string_lossy().replace('\\', "/");
        text.push_str(&format!("{}  {rel}\n", sha256_file(&dir.join(f))?));
    }
    let path = dir.join(MANIFEST);
    write_file(&path, text)?;
    Ok(path)
}

#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub sweep: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub manifest: PathBuf,
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Config("synth needs a synthetic [data] section, not a dataset path".into()));
    };
    create_dir(out)?;
    save_dataset(&synth_generate(s)?, out)?;
    Ok(RunArtifacts {
        manifest: write_manifest(out)?,
        ..Default::default()
    })
}

/// Trains one model from scratch on the training split.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
) -> Result<(Nlcen, ParamStore, Vec<EpochLog>)> {
    let net = Nlcen::new(model_config(cfg, data, variant)?)?;
    let mut params = net.init(cfg.seed)?;
    let train_set = data.split(Split::Train);
    let log = train(&net, &mut params, &train_set, &cfg.train_config(data.kind_for_training()), TrainMode::All)?;
    Ok((net, params, log))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let data = load_data(cfg)?;
    let (_, params, log) = train_model(cfg, &data, cfg.model.variant)?;
    create_dir(&cfg.out)?;
    let ckpt = cfg.out.join("checkpoint.nlck");
    checkpoint::save(&params, &ckpt)?;
    let log_path = cfg.out.join("train_log.csv");
    write_file(&log_path, log_csv(&log))?;
    Ok(RunArtifacts {
        checkpoint: Some(ckpt),
        train_log: Some(log_path),
        manifest: write_manifest(&cfg.out)?,
        ..Default::default()
    })
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &ExperimentConfig, data: &Dataset, checkpoint_path: &Path) -> Result<(Nlcen, ParamStore)> {
    let net = Nlcen::new(model_config(cfg, data, cfg.model.variant)?)?;
    let params = checkpoint::load(checkpoint_path)?;
    net.check_params(&params)?;
    Ok((net, params))
}

fn test_split(data: &Dataset) -> Result<Vec<SampleRecord>> {
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    Ok(test)
}

/// Per-image clean scores followed by a `mean` row.
pub fn eval_csv(model: &impl AttackTarget, samples: &[SampleRecord]) -> Result<String> {
    let mut out = String::from("id,dic,jsc\n");
    let (mut sd, mut sj) = (0.0, 0.0);
    for s in samples {
        let pred = model.predict(&batch_tensor(&[&s.image])?)?;
        let c = confusion(&pred.data, &s.mask.data)?;
        let (d, j) = (dic(&c), jsc(&c));
        sd += d;
        sj += j;
        out.push_str(&format!("{},{d:.6},{j:.6}\n", s.id));
    }
    let n = samples.len() as f64;
    out.push_str(&format!("mean,{:.6},{:.6}\n", sd / n, sj / n));
    Ok(out)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<RunArtifacts> {
    let data = load_data(cfg)?;
    let test = test_split(&data)?;
    let (net, params) = load_model(cfg, &data, checkpoint_path)?;
    let csv = eval_csv(&Segmenter::new(&net, &params), &test)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("metrics.csv");
    write_file(&path, csv)?;
    Ok(RunArtifacts {
        metrics: Some(path),
        manifest: write_manifest(&cfg.out)?,
        ..Default::default()
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<RunArtifacts> {
    let data = load_data(cfg)?;
    let test = test_split(&data)?;
    let (net, params) = load_model(cfg, &data, checkpoint_path)?;
    let rows = sweep(&Segmenter::new(&net, &params), &test, &cfg.intensities, cfg.alpha)?;
    create_dir(&cfg.out)?;
    let csv = cfg.out.join("sweep.csv");
    write_file(&csv, sweep_csv(&rows))?;
    let svg = cfg.out.join("sweep.svg");
    write_file(&svg, sweep_svg(&rows, &format!("{} under targeted I-FGSM", cfg.model.variant)))?;
    Ok(RunArtifacts {
        sweep: Some(csv),
        plot: Some(svg),
        manifest: write_manifest(&cfg.out)?,
        ..Default::default()
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// DIC and JSC against ε as an SVG line chart with fixed axes
/// ε ∈ [0, 32] and metric ∈ [0, 1].
pub fn sweep_svg(rows: &[SweepRow], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let px = |eps: f64| L + eps.clamp(0.0, 32.0) / 32.0 * (W - L - R);
    let py = |v: f64| T + (1.0 - v.clamp(0.0, 1.0)) * (H - T - B);
    let line = |f: fn(&SweepRow) -> f64| {
        rows.iter()
            .filter(|r| f(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r.epsilon), py(f(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    ));
    for i in 0..=4 {
        let eps = i as f64 * 8.0;
        let v = i as f64 / 4.0;
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#ddd\"/>\n<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{eps}</text>\n",
            T,
            H - B,
            H - B + 18.0,
            x = px(eps),
        ));
        s.push_str(&format!(
            "<line x1=\"{L}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">{v:.2}</text>\n",
            W - R,
            L - 6.0,
            py(v) + 4.0,
            y = py(v),
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">epsilon (pixel units)</text>\n",
        (L + W - R) / 2.0,
        H - 12.0
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"><title>DIC</title></polyline>\n",
        line(|r| r.dic)
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6 3\" points=\"{}\"><title>JSC</title></polyline>\n",
        line(|r| r.jsc)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f77b4\">DIC</text>\n<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#d62728\">JSC</text>\n",
        W - R - 60.0,
        T + 16.0,
        W - R - 60.0,
        T + 32.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Model tags of the ablation, in output order.
pub const ABLATION_MODELS: [&str; 5] = ["no-nlce", "no-nl", "no-ce", "full", "full-unfrozen"];

/// One trained model of the ablation protocol.
#[derive(Clone, Debug)]
pub struct AblationModel {
    pub tag: &'static str,
    pub net: Nlcen,
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    /// Checksum of the non-NLCE parameters after training.
    pub base_checksum: u64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub models: Vec<AblationModel>,
    /// Checksum of the base network after the first stage.
    pub base_checksum: u64,
    /// `(model tag, sweep row)` for every model and intensity.
    pub rows: Vec<(&'static str, SweepRow)>,
}

impl AblationReport {
    /// Whether every frozen fine-tune left the base network untouched.
    pub fn frozen_base_intact(&self) -> bool {
        self.models
            .iter()
            .filter(|m| matches!(m.tag, "no-nl" | "no-ce" | "full"))
            .all(|m| m.base_checksum == self.base_checksum)
    }

    pub fn row(&self, tag: &str, epsilon: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|(t, r)| *t == tag && r.epsilon == epsilon).map(|(_, r)| r)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("model,epsilon,dic,jsc,n_images\n");
        let mut rows = self.rows.clone();
        // ε-major so each intensity lists all five models together.
        rows.sort_by(|a, b| a.1.epsilon.total_cmp(&b.1.epsilon));
        for (tag, r) in rows {
            out.push_str(&format!("{tag},{}\n", r.csv()));
        }
        out
    }
}

/// Copies every parameter of `from` that `into` also has.
fn transfer(from: &ParamStore, into: &mut ParamStore) -> Result<()> {
    for p in from.iter() {
        if into.contains(&p.name) {
            into.set(&p.name, p.tensor.clone())?;
        }
    }
    Ok(())
}

/// Runs the ablation protocol in memory:
///
/// 1. train the no-NLCE network;
/// 2. fine-tune no-NL, no-CE and full NLCEN from it with the base frozen;
/// 3. fine-tune the full NLCEN again with nothing frozen;
/// 4. sweep all five models over `cfg.intensities` on the test split.
pub fn run_ablation(cfg: &ExperimentConfig, data: &Dataset) -> Result<AblationReport> {
    let test = test_split(data)?;
    let train_set = data.split(Split::Train);
    let tcfg = cfg.train_config(data.kind_for_training());
    let ft = crate::train::TrainConfig {
        epochs: cfg.finetune_epochs,
        ..tcfg.clone()
    };

    log::info!("ablation: training no-nlce base");
    let (base_net, base, base_log) = train_model(cfg, data, Variant::NoNlce)?;
    let base_checksum = base.checksum(is_base_param);
    let mut models = vec![AblationModel {
        tag: "no-nlce",
        net: base_net,
        params: base.clone(),
        log: base_log,
        base_checksum,
    }];

    for (tag, variant) in [("no-nl", Variant::NoNl), ("no-ce", Variant::NoCe), ("full", Variant::Full)] {
        log::info!("ablation: frozen fine-tune of {tag}");
        let net = Nlcen::new(model_config(cfg, data, variant)?)?;
        let mut params = net.init(cfg.seed)?;
        transfer(&base, &mut params)?;
        let log = train(&net, &mut params, &train_set, &ft, TrainMode::FrozenBase)?;
        let base_checksum = params.checksum(is_base_param);
        models.push(AblationModel {
            tag,
            net,
            params,
            log,
            base_checksum,
        });
    }

    log::info!("ablation: unfrozen fine-tune of full");
    let full = models.last().expect("full model").clone();
    let mut params = full.params.clone();
    let log = train(&full.net, &mut params, &train_set, &ft, TrainMode::All)?;
    models.push(AblationModel {
        tag: "full-unfrozen",
        net: full.net,
        base_checksum: params.checksum(is_base_param),
        params,
        log,
    });

    let mut rows = Vec::new();
    for m in &models {
        log::info!("ablation: sweeping {}", m.tag);
        for r in sweep(&Segmenter::new(&m.net, &m.params), &test, &cfg.intensities, cfg.alpha)? {
            rows.push((m.tag, r));
        }
    }
    Ok(AblationReport {
        models,
        base_checksum,
        rows,
    })
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(AblationReport, RunArtifacts)> {
    let data = load_data(cfg)?;
    let report = run_ablation(cfg, &data)?;
    create_dir(&cfg.out)?;
    for m in &report.models {
        checkpoint::save(&m.params, cfg.out.join(format!("{}.nlck", m.tag)))?;
        write_file(&cfg.out.join(format!("train_log_{}.csv", m.tag)), log_csv(&m.log))?;
        let rows: Vec<SweepRow> = report.rows.iter().filter(|(t, _)| *t == m.tag).map(|(_, r)| *r).collect();
        write_file(&cfg.out.join(format!("sweep_{}.csv", m.tag)), sweep_csv(&rows))?;
    }
    let combined = cfg.out.join("ablation.csv");
    write_file(&combined, report.csv())?;
    let mut freeze = String::from("model,base_checksum,matches_no_nlce\n");
    for m in &report.models {
        freeze.push_str(&format!(
            "{},{:016x},{}\n",
            m.tag,
            m.base_checksum,
            m.base_checksum == report.base_checksum
        ));
    }
    write_file(&cfg.out.join("freeze_check.csv"), freeze)?;
    let artifacts = RunArtifacts {
        sweep: Some(combined),
        manifest: write_manifest(&cfg.out)?,
        ..Default::default()
    };
    Ok((report, artifacts))
}
