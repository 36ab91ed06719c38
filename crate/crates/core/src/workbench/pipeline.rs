//! Stage orchestration over a run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
use super::config::{DataSource, RunConfig};
use super::metrics::MetricsWriter;
use crate::consistency::{sample_cm_batch, ConsistencyModel, DistillConfig, Distiller};
use crate::corruption::transforms::resize_bilinear;
use crate::corruption::PairedDataset;
use crate::data::{read_manifest, shapes_dataset, LabeledImage, DATA_ROOT_ENV};
use crate::diffusion::{sample_dpm_batch, Denoiser, DpmTrainer};
use crate::image::ImageTensor;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::seed::{self, tag};
use crate::tta::{
    corrupted_benchmark, edit_seed, evaluate_tta, train_classifier, Classifier, ClassifierConfig, ClassifierReport,
    CmEditor, CorruptedSet, DpmEditor, Editor, IdentityEditor, TTAConfig, TTAResult,
};
use crate::unet::{UNet, UNetConfig};
use crate::{Error, Result};

/// First index of the shapes test split, far from the training indices.
const SHAPES_TEST_OFFSET: usize = 1_000_000;

/// Well-known file names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn dpm(&self) -> PathBuf {
        self.root.join("dpm.ckpt")
    }
    pub fn cm(&self) -> PathBuf {
        self.root.join("cm.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn tta(&self) -> PathBuf {
        self.root.join("tta.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

/// Train, validation and test images.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Loss curve of a training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
}

impl StageSummary {
    /// Mean of `losses[range]`, clamped to the curve.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let to = to.min(self.losses.len());
        let from = from.min(to);
        if from == to {
            return f64::NAN;
        }
        self.losses[from..to].iter().sum::<f64>() / (to - from) as f64
    }
}

/// Side-by-side comparison of the two editors on the same inputs and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub samples: usize,
    pub mse_cm_vs_dpm: f64,
    pub dpm_counted_nfe_per_edit: f64,
    pub cm_counted_nfe_per_edit: f64,
    pub wall_dpm_seconds: f64,
    pub wall_cm_seconds: f64,
}

impl Agreement {
    pub fn wall_ratio(&self) -> f64 {
        self.wall_dpm_seconds / self.wall_cm_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaReport {
    pub config_hash: String,
    pub results: Vec<TTAResult>,
    pub agreement: Agreement,
}

impl TtaReport {
    pub fn result(&self, editor_prefix: &str) -> Option<&TTAResult> {
        self.results.iter().find(|r| r.editor.starts_with(editor_prefix))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    pub hash: String,
    pub dir: RunDir,
    pub log: bool,
}

impl Pipeline {
    /// Prepares `out` for this configuration. A directory that already holds
    /// a different configuration is refused.
    pub fn new(config: RunConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::new(out);
        std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
        let hash = config.hash();
        let path = dir.config();
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if existing.hash() != hash {
                return Err(Error::HashMismatch(format!(
                    "{} holds config {}, requested {}",
                    path.display(),
                    existing.short_hash(),
                    config.short_hash()
                )));
            }
        } else {
            config.save(&path)?;
        }
        Ok(Self {
            config,
            hash,
            dir,
            log: false,
        })
    }

    /// Opens an existing run directory with its stored configuration.
    pub fn open(out: &Path) -> Result<Self> {
        let config = RunConfig::load(&RunDir::new(out).config())?;
        Self::new(config, out)
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.log = on;
        self
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.log {
            eprintln!("[{}] {}", &self.hash[..8], msg.as_ref());
        }
    }

    fn metrics(&self) -> Result<MetricsWriter> {
        MetricsWriter::open(&self.dir.metrics(), &self.hash)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(&self.config.schedule)
    }

    pub fn splits(&self) -> Result<Splits> {
        let d = &self.config.data;
        let size = d.image_size;
        match &d.source {
            DataSource::Shapes => Ok(Splits {
                train: shapes_dataset(self.config.seed, 0, d.train_images, size),
                val: shapes_dataset(self.config.seed, d.train_images, d.val_images, size),
                test: shapes_dataset(self.config.seed, SHAPES_TEST_OFFSET, d.test_images, size),
            }),
            DataSource::Manifest { train, test } => {
                let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
                let mut all = read_manifest(train, root.as_deref(), size)?;
                let test = read_manifest(test, root.as_deref(), size)?;
                if all.len() < d.train_images + d.val_images || test.len() < d.test_images {
                    return Err(Error::Config(format!(
                        "manifests hold {} train and {} test images, config asks for {} + {} and {}",
                        all.len(),
                        test.len(),
                        d.train_images,
                        d.val_images,
                        d.test_images
                    )));
                }
                all.truncate(d.train_images + d.val_images);
                let val = all.split_off(d.train_images);
                Ok(Splits {
                    train: all,
                    val,
                    test: test.into_iter().take(d.test_images).collect(),
                })
            }
        }
    }

    /// Crafts the paired training set and writes it to the run directory.
    pub fn craft(&self) -> Result<PairedDataset> {
        let t0 = Instant::now();
        let splits = self.splits()?;
        let ds = PairedDataset::build(
            &splits.train[..self.config.data.craft_images],
            &self.config.craft,
            seed::derive(self.config.seed, &[tag::CRAFT]),
            &self.hash,
        )?;
        ds.save(&self.dir.dataset())?;
        let mean_abs: f64 = ds
            .pairs
            .iter()
            .map(|p| {
                p.clean
                    .data()
                    .iter()
                    .zip(p.corrupted.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / p.clean.data().len() as f64
            })
            .sum::<f64>()
            / ds.pairs.len() as f64;
        self.metrics()?.log(
            "craft",
            0,
            &[
                ("pairs", ds.pairs.len() as f64),
                ("mean_abs_diff", mean_abs),
                ("wall_seconds", t0.elapsed().as_secs_f64()),
            ],
        )?;
        self.say(format!("crafted {} pairs", ds.pairs.len()));
        Ok(ds)
    }

    pub fn load_dataset(&self) -> Result<PairedDataset> {
        let ds = PairedDataset::load(&self.dir.dataset())?;
        if ds.config_hash != self.hash {
            return Err(Error::HashMismatch(format!(
                "dataset was crafted by config {}, run is {}",
                ds.config_hash, self.hash
            )));
        }
        Ok(ds)
    }

    pub fn train_classifier(&self) -> Result<(Classifier, ClassifierReport)> {
        let t0 = Instant::now();
        let splits = self.splits()?;
        let stage = &self.config.classifier;
        let (clf, rep) = train_classifier(
            &splits.train,
            &splits.val,
            &stage.model,
            &stage.train,
            seed::derive(self.config.seed, &[tag::CLASSIFIER]),
        )?;
        let meta = CheckpointMeta::new(ModelKind::Classifier, &self.hash, self.config.seed, rep.steps as u64)
            .with_extra("classifier", &stage.model)?;
        Checkpoint::new(meta, clf.params.clone()).save(&self.dir.classifier())?;
        let mut m = self.metrics()?;
        let base = m.next_step("train_classifier");
        let every = stage.train.eval_every.max(1);
        for (i, chunk) in rep.losses.chunks(every).enumerate() {
            let step = base + (i * every + chunk.len()) as u64;
            m.log(
                "train_classifier",
                step,
                &[("loss", chunk.iter().sum::<f64>() / chunk.len() as f64)],
            )?;
        }
        m.log(
            "train_classifier",
            base + rep.steps as u64,
            &[
                ("val_accuracy", rep.val_accuracy),
                ("wall_seconds", t0.elapsed().as_secs_f64()),
            ],
        )?;
        self.say(format!(
            "classifier: {:.3} validation accuracy after {} steps",
            rep.val_accuracy, rep.steps
        ));
        Ok((clf, rep))
    }

    pub fn load_classifier(&self) -> Result<Classifier> {
        let ck = Checkpoint::load(&self.dir.classifier())?;
        ck.expect_kind(ModelKind::Classifier)?;
        load_classifier(&ck)
    }

    fn new_denoiser(&self) -> Result<Denoiser> {
        let (net, params) = UNet::init(&self.config.model, &mut seed::stream(self.config.seed, &[tag::INIT]))?;
        Ok(Denoiser::new(net, params, self.config.codec, self.schedule()?))
    }

    fn denoiser_meta(&self, kind: ModelKind, step: u64, d: &Denoiser) -> Result<CheckpointMeta> {
        let mut meta = CheckpointMeta::new(kind, &self.hash, self.config.seed, step)
            .with_extra("model", &self.config.model)?
            .with_extra("schedule", &self.config.schedule)?;
        meta.codec = Some(self.config.codec);
        meta.schedule_hash = Some(d.schedule.table_hash());
        Ok(meta)
    }

    pub fn train_dpm(&self) -> Result<(Denoiser, StageSummary)> {
        let ds = self.load_dataset()?;
        let cfg = &self.config.train_dpm;
        let mut model = self.new_denoiser()?;
        let mut trainer = DpmTrainer::new(cfg.clone(), seed::derive(self.config.seed, &[tag::DPM_TRAIN]))?;
        let mut m = self.metrics()?;
        let base = m.next_step("train_dpm");
        let t0 = Instant::now();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 1..=cfg.steps {
            losses.push(trainer.train_step(&mut model, &ds.pairs)?);
            if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
                log_window(&mut m, "train_dpm", base + step as u64, &losses, cfg.log_every)?;
                self.say(format!("dpm step {step}: loss {:.4}", losses[step - 1]));
            }
        }
        let meta = self.denoiser_meta(ModelKind::Dpm, cfg.steps as u64, &model)?;
        Checkpoint::new(meta, model.params.clone()).save(&self.dir.dpm())?;
        Ok((
            model,
            StageSummary {
                steps: cfg.steps,
                losses,
                wall_seconds: t0.elapsed().as_secs_f64(),
            },
        ))
    }

    pub fn load_dpm(&self) -> Result<Denoiser> {
        let ck = Checkpoint::load(&self.dir.dpm())?;
        ck.expect_kind(ModelKind::Dpm)?;
        ck.expect_codec(&self.config.codec)?;
        load_denoiser(&ck)
    }

    pub fn distill_cm(&self) -> Result<(ConsistencyModel, StageSummary)> {
        let ds = self.load_dataset()?;
        let teacher = self.load_dpm()?;
        let cfg = &self.config.distill_cm;
        let mut d = Distiller::new(&teacher, cfg.clone(), seed::derive(self.config.seed, &[tag::DISTILL]))?;
        let mut m = self.metrics()?;
        let base = m.next_step("distill_cm");
        let t0 = Instant::now();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 1..=cfg.steps {
            losses.push(d.train_step(&teacher, &ds.pairs)?.loss);
            if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
                log_window(&mut m, "distill_cm", base + step as u64, &losses, cfg.log_every)?;
                self.say(format!("cm step {step}: loss {:.5}", losses[step - 1]));
            }
        }
        let meta = self
            .denoiser_meta(ModelKind::Cm, cfg.steps as u64, &d.student.denoiser)?
            .with_extra("distill", cfg)?;
        Checkpoint::new(meta, d.student.denoiser.params.clone()).save(&self.dir.cm())?;
        Ok((
            d.student,
            StageSummary {
                steps: cfg.steps,
                losses,
                wall_seconds: t0.elapsed().as_secs_f64(),
            },
        ))
    }

    pub fn load_cm(&self) -> Result<ConsistencyModel> {
        let ck = Checkpoint::load(&self.dir.cm())?;
        ck.expect_kind(ModelKind::Cm)?;
        ck.expect_codec(&self.config.codec)?;
        load_consistency(&ck)
    }

    /// The corrupted evaluation sets, `eval_samples` test images each.
    pub fn benchmark(&self) -> Result<Vec<CorruptedSet>> {
        let t = &self.config.tta;
        let splits = self.splits()?;
        let n = t.eval_samples.min(splits.test.len());
        corrupted_benchmark(
            &splits.test[..n],
            &t.kinds,
            &t.severities,
            &t.severity_table,
            seed::derive(self.config.seed, &[tag::TEST_CORRUPTION]),
        )
    }

    /// Scores the identity, consistency and optionally diffusion editors and
    /// compares the two model editors on a fixed subset.
    pub fn tta_eval(&self) -> Result<TtaReport> {
        let clf = self.load_classifier()?;
        let cm = self.load_cm()?;
        let dpm = if self.config.tta.include_dpm || self.config.tta.agreement_samples > 0 {
            Some(self.load_dpm()?)
        } else {
            None
        };
        let sets = self.benchmark()?;
        let e = &self.config.edit;
        let tcfg = TTAConfig {
            n_edits: self.config.tta.n_edits,
            chunk: self.config.tta.chunk,
        };
        let root = seed::derive(self.config.seed, &[tag::SAMPLE]);
        let cm_editor = CmEditor {
            model: &cm,
            nfe: e.cm_nfe,
            omega: (e.cm_omega_i, e.cm_omega_t),
        };
        let mut editors: Vec<Box<dyn Editor + '_>> = vec![Box::new(IdentityEditor), Box::new(cm_editor)];
        if let (true, Some(dpm)) = (self.config.tta.include_dpm, &dpm) {
            editors.push(Box::new(DpmEditor {
                model: dpm,
                steps: e.dpm_steps,
                guidance: e.guidance.clone(),
            }));
        }
        let mut results = Vec::new();
        for ed in &editors {
            self.say(format!("tta: editor {}", ed.name()));
            results.push(evaluate_tta(&clf, ed.as_ref(), &sets, &tcfg, root)?);
        }
        let agreement = match &dpm {
            Some(dpm) if self.config.tta.agreement_samples > 0 => self.agreement(&cm, dpm, &sets)?,
            _ => Agreement {
                samples: 0,
                mse_cm_vs_dpm: f64::NAN,
                dpm_counted_nfe_per_edit: 0.0,
                cm_counted_nfe_per_edit: 0.0,
                wall_dpm_seconds: 0.0,
                wall_cm_seconds: 0.0,
            },
        };
        let report = TtaReport {
            config_hash: self.hash.clone(),
            results,
            agreement,
        };
        std::fs::write(self.dir.tta(), serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(self.dir.tta(), e))?;
        self.log_tta(&report)?;
        Ok(report)
    }

    fn agreement(&self, cm: &ConsistencyModel, dpm: &Denoiser, sets: &[CorruptedSet]) -> Result<Agreement> {
        let want = self.config.tta.agreement_samples;
        // Round-robin over the corruption sets so every kind is represented.
        let mut inputs: Vec<ImageTensor> = Vec::with_capacity(want);
        let longest = sets.iter().map(|s| s.corrupted.len()).max().unwrap_or(0);
        'outer: for i in 0..longest {
            for s in sets {
                if let Some(l) = s.corrupted.get(i) {
                    inputs.push(l.image.clone());
                    if inputs.len() == want {
                        break 'outer;
                    }
                }
            }
        }
        let root = seed::derive(self.config.seed, &[tag::SAMPLE, u64::MAX]);
        let seeds: Vec<u64> = (0..inputs.len()).map(|i| edit_seed(root, 0, i, 0)).collect();
        let e = &self.config.edit;
        let (mut wall_d, mut wall_c) = (0.0, 0.0);
        let (mut out_d, mut out_c) = (Vec::new(), Vec::new());
        dpm.reset_nfe();
        cm.reset_nfe();
        let chunk = self.config.tta.chunk;
        for (imgs, sd) in inputs.chunks(chunk).zip(seeds.chunks(chunk)) {
            let t0 = Instant::now();
            out_d.extend(sample_dpm_batch(dpm, imgs, e.dpm_steps, &e.guidance, sd)?);
            wall_d += t0.elapsed().as_secs_f64();
            let t0 = Instant::now();
            out_c.extend(sample_cm_batch(cm, imgs, e.cm_nfe, (e.cm_omega_i, e.cm_omega_t), sd)?);
            wall_c += t0.elapsed().as_secs_f64();
        }
        let n = inputs.len().max(1) as f64;
        let mut mse = 0.0;
        for (a, b) in out_d.iter().zip(&out_c) {
            mse += a.mse(b)?;
        }
        Ok(Agreement {
            samples: inputs.len(),
            mse_cm_vs_dpm: mse / n,
            dpm_counted_nfe_per_edit: dpm.nfe() as f64 / n,
            cm_counted_nfe_per_edit: cm.nfe() as f64 / n,
            wall_dpm_seconds: wall_d,
            wall_cm_seconds: wall_c,
        })
    }

    fn log_tta(&self, report: &TtaReport) -> Result<()> {
        let mut m = self.metrics()?;
        let mut row_step = m.next_step("tta_eval");
        for (summary_step, r) in (m.next_step("tta_summary")..).zip(&report.results) {
            for row in &r.rows {
                let mut metrics = vec![
                    ("source_accuracy", row.source_accuracy),
                    ("tta_accuracy", row.tta_accuracy()),
                    ("mse_corrupted", row.mse_corrupted),
                    ("mse_edited", row.mse_edited),
                    ("psnr_corrupted", row.psnr_corrupted),
                    ("psnr_edited", row.psnr_edited),
                ];
                let names: Vec<String> = (1..=row.tta_accuracy_by_edits.len())
                    .map(|k| format!("tta_accuracy_{k}_edits"))
                    .collect();
                for (k, name) in names.iter().enumerate() {
                    metrics.push((name.as_str(), row.tta_accuracy_by_edits[k]));
                }
                m.log_labeled(
                    "tta_eval",
                    row_step,
                    &[
                        ("editor", r.editor.clone()),
                        ("kind", row.kind.as_str().to_string()),
                        ("severity", row.severity.to_string()),
                    ],
                    &metrics,
                )?;
                row_step += 1;
            }
            m.log_labeled(
                "tta_summary",
                summary_step,
                &[("editor", r.editor.clone())],
                &[
                    ("mean_source_accuracy", r.mean_source_accuracy()),
                    ("mean_tta_accuracy", r.mean_tta_accuracy()),
                    ("nfe_per_sample", r.nfe_per_sample as f64),
                    ("wall_seconds_per_sample", r.wall_seconds_per_sample),
                ],
            )?;
        }
        let a = &report.agreement;
        let step = m.next_step("agreement");
        m.log(
            "agreement",
            step,
            &[
                ("samples", a.samples as f64),
                ("mse_cm_vs_dpm", a.mse_cm_vs_dpm),
                ("dpm_counted_nfe_per_edit", a.dpm_counted_nfe_per_edit),
                ("cm_counted_nfe_per_edit", a.cm_counted_nfe_per_edit),
                ("wall_dpm_seconds", a.wall_dpm_seconds),
                ("wall_cm_seconds", a.wall_cm_seconds),
            ],
        )
    }

    /// Edits a PNG file or every PNG in a folder, writing `<stem>.png` and a
    /// `<stem>.json` sidecar into `request.output`.
    pub fn edit(&self, request: &EditRequest) -> Result<Vec<EditSidecar>> {
        let files = collect_pngs(&request.input)?;
        std::fs::create_dir_all(&request.output).map_err(|e| Error::io(&request.output, e))?;
        let size = self.config.data.image_size;
        let e = &self.config.edit;
        enum Loaded {
            Dpm(Denoiser),
            Cm(ConsistencyModel),
        }
        let (model, ckpt) = match request.model {
            ModelKind::Dpm => (Loaded::Dpm(self.load_dpm()?), self.dir.dpm()),
            ModelKind::Cm => (Loaded::Cm(self.load_cm()?), self.dir.cm()),
            ModelKind::Classifier => {
                return Err(Error::InvalidArgument("edit needs a dpm or cm checkpoint".into()));
            }
        };
        let mut out = Vec::with_capacity(files.len());
        for (i, file) in files.iter().enumerate() {
            let img = ImageTensor::load_png(file)?;
            let img = if img.height() == size && img.width() == size {
                img
            } else {
                resize_bilinear(&img, size, size)
            };
            let seed = seed::derive(request.seed, &[tag::SAMPLE, i as u64]);
            let (edited, nfe, counted, omega_i, omega_t, mode) = match &model {
                Loaded::Dpm(m) => {
                    let steps = request.steps.unwrap_or(e.dpm_steps);
                    let mut g = e.guidance.clone();
                    if let Some((wi, wt)) = request.omega {
                        g.omega_i_max = wi;
                        g.omega_t = wt;
                    }
                    m.reset_nfe();
                    let o = sample_dpm_batch(m, std::slice::from_ref(&img), steps, &g, &[seed])?;
                    let mode = serde_json::to_value(g.omega_i_mode)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string();
                    (o, 3 * steps, m.nfe(), g.omega_i_max, g.omega_t, mode)
                }
                Loaded::Cm(m) => {
                    let nfe = request.nfe.unwrap_or(e.cm_nfe);
                    let omega = request.omega.unwrap_or((e.cm_omega_i, e.cm_omega_t));
                    m.reset_nfe();
                    let o = sample_cm_batch(m, std::slice::from_ref(&img), nfe, omega, &[seed])?;
                    (o, nfe, m.nfe(), omega.0, omega.1, "embedded".to_string())
                }
            };
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            let png = request.output.join(format!("{stem}.png"));
            edited[0].save_png(&png)?;
            let sidecar = EditSidecar {
                source: file.display().to_string(),
                output: png.display().to_string(),
                model: request.model.as_str().to_string(),
                checkpoint: ckpt.display().to_string(),
                config_hash: self.hash.clone(),
                nfe,
                counted_nfe: counted,
                omega_i,
                omega_t,
                omega_i_mode: mode,
                seed,
            };
            let json = request.output.join(format!("{stem}.json"));
            std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
            self.say(format!("edited {} ({} evaluations)", file.display(), counted));
            out.push(sidecar);
        }
        Ok(out)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<RunSummary> {
        self.craft()?;
        let (_, classifier) = self.train_classifier()?;
        let (_, dpm) = self.train_dpm()?;
        let (_, cm) = self.distill_cm()?;
        let tta = self.tta_eval()?;
        std::fs::write(self.dir.report(), super::report::render(&self.dir, false)?)
            .map_err(|e| Error::io(self.dir.report(), e))?;
        Ok(RunSummary {
            classifier,
            dpm,
            cm,
            tta,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub model: ModelKind,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Consistency steps; defaults to the config.
    pub nfe: Option<usize>,
    /// Diffusion sampling steps; defaults to the config.
    pub steps: Option<usize>,
    /// `(omega_i, omega_t)`; for the diffusion editor `omega_i` is the
    /// maximum of the image-guidance schedule.
    pub omega: Option<(f64, f64)>,
    pub seed: u64,
}

/// Metadata written next to every edited image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSidecar {
    pub source: String,
    pub output: String,
    pub model: String,
    pub checkpoint: String,
    pub config_hash: String,
    /// Nominal network evaluations per edit.
    pub nfe: usize,
    /// Evaluations actually counted by the model.
    pub counted_nfe: u64,
    pub omega_i: f64,
    pub omega_t: f64,
    pub omega_i_mode: String,
    pub seed: u64,
}

fn collect_pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.exists() {
        return Err(Error::MissingArtifact(input.to_path_buf()));
    }
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} contains no PNG files",
            input.display()
        )));
    }
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub classifier: ClassifierReport,
    pub dpm: StageSummary,
    pub cm: StageSummary,
    pub tta: TtaReport,
}

fn log_window(m: &mut MetricsWriter, stage: &str, step: u64, losses: &[f64], window: usize) -> Result<()> {
    let w = window.max(1).min(losses.len());
    let recent = &losses[losses.len() - w..];
    m.log(
        stage,
        step,
        &[
            ("loss", recent.iter().sum::<f64>() / w as f64),
            ("loss_last", losses[losses.len() - 1]),
        ],
    )
}

/// Rebuilds a classifier from its checkpoint.
pub fn load_classifier(ck: &Checkpoint) -> Result<Classifier> {
    let cfg: ClassifierConfig = ck.meta.extra("classifier")?;
    Classifier::with_params(&cfg, ck.params.clone())
}

fn denoiser_parts(ck: &Checkpoint) -> Result<(UNet, NoiseSchedule)> {
    let model: UNetConfig = ck.meta.extra("model")?;
    let sched: ScheduleConfig = ck.meta.extra("schedule")?;
    let schedule = NoiseSchedule::cosine(&sched)?;
    if let Some(h) = &ck.meta.schedule_hash {
        if *h != schedule.table_hash() {
            return Err(Error::HashMismatch(
                "checkpoint schedule table differs from its recorded hash".into(),
            ));
        }
    }
    let (net, mut reference) = UNet::init::<f32, _>(&model, &mut seed::stream(0, &[]))?;
    if ck.meta.kind == ModelKind::Cm {
        net.add_guidance_projection(&mut reference);
    }
    if !reference.same_layout(&ck.params) {
        return Err(Error::Config(
            "checkpoint parameters do not match the recorded model configuration".into(),
        ));
    }
    Ok((net, schedule))
}

pub fn load_denoiser(ck: &Checkpoint) -> Result<Denoiser> {
    let codec = ck
        .meta
        .codec
        .ok_or_else(|| Error::Config("checkpoint records no latent codec".into()))?;
    let (net, schedule) = denoiser_parts(ck)?;
    Ok(Denoiser::new(net, ck.params.clone(), codec, schedule))
}

pub fn load_consistency(ck: &Checkpoint) -> Result<ConsistencyModel> {
    let config: DistillConfig = ck.meta.extra("distill")?;
    Ok(ConsistencyModel {
        denoiser: load_denoiser(ck)?,
        config,
    })
}
