//! Artifact orchestration behind the CLI subcommands. Every artifact path
//! embeds a hash of exactly the settings that produced it, and no stage
//! silently runs its upstream stages.

use std::sync::OnceLock;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, ExperimentConfig, Regime};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_config, ConfigEval, EvalProtocol, ReferenceSet, ReportRow, ReportTable};
use crate::guidance::{sample, Combiner, GuidanceConfig, Guided};
use crate::models::{ConditionalField, ModelTriple};
use crate::objectives::ReferenceTerms;
use crate::parallel;
use crate::plot;
use crate::preference_data::{generate_pairs, load_pairs, record_seed, write_pairs, PreferenceRecord, TaskSpec};
use crate::processes::NoiseSchedule;
use crate::training::{self, write_metrics_csv, Flatten, MetricsRow, TrainConfig};

/// Finetuning recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Chats,
    /// CHATS loss with the reference terms zeroed.
    ChatsNoref,
    Dpo,
    /// Plain regression on both sides of every pair.
    SftFull,
    /// Plain regression on preferred samples only.
    SftPreferred,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Chats,
        Method::ChatsNoref,
        Method::Dpo,
        Method::SftFull,
        Method::SftPreferred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Chats => "chats",
            Method::ChatsNoref => "chats_noref",
            Method::Dpo => "dpo",
            Method::SftFull => "sft_full",
            Method::SftPreferred => "sft_preferred",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config {
            path: "method".into(),
            message: format!(
                "unknown method `{s}` (expected one of {})",
                Self::ALL.map(|m| m.name()).join(", ")
            ),
        })
    }

    pub fn is_pair(self) -> bool {
        matches!(self, Method::Chats | Method::ChatsNoref)
    }

    /// Effective training settings, seeds resolved.
    pub fn train_config(self, cfg: &ExperimentConfig) -> TrainConfig {
        let t = &cfg.train;
        let mut c = match self {
            Method::Chats | Method::ChatsNoref => cfg.phase_config(&t.chats),
            Method::Dpo => cfg.phase_config(&t.dpo),
            Method::SftFull | Method::SftPreferred => cfg.phase_config(&t.standard),
        };
        match self {
            Method::ChatsNoref => c.reference_terms = ReferenceTerms::Dropped,
            Method::SftFull => c.flatten = Flatten::Full,
            Method::SftPreferred => c.flatten = Flatten::PreferredOnly,
            _ => {}
        }
        c
    }
}

/// A model named by the stage that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRef {
    Pretrained,
    Finetuned(Method, Regime),
}

impl ModelRef {
    pub fn parse(method: &str, regime: Regime) -> Result<Self> {
        if method == "pretrained" {
            Ok(ModelRef::Pretrained)
        } else {
            Ok(ModelRef::Finetuned(Method::parse(method)?, regime))
        }
    }
}

pub enum LoadedModel {
    Single(ConditionalField),
    Triple(ModelTriple),
}

impl LoadedModel {
    pub fn guided(&self) -> Guided<'_, ConditionalField> {
        match self {
            LoadedModel::Single(f) => Guided::Single(f),
            LoadedModel::Triple(t) => Guided::Pair {
                preferred: &t.preferred,
                dispreferred: &t.dispreferred,
            },
        }
    }
}

/// What a subcommand wrote, plus a one-line description.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
    pub table: Option<ReportTable>,
}

#[derive(Serialize)]
struct EvalKey<'a> {
    experiment: &'a str,
    rows: Vec<(String, String, GuidanceConfig)>,
    protocol: &'a EvalProtocol,
    task: &'a crate::preference_data::TaskConfig,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    task: TaskSpec,
    sched: NoiseSchedule,
    reference: OnceLock<ReferenceSet>,
}

fn missing(path: &Path, requires: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            requires,
        })
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

impl Pipeline {
    /// `out` overrides the configured output directory.
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let task = cfg.task.build()?;
        let sched = cfg.schedule.build()?;
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self {
            cfg,
            out,
            task,
            sched,
            reference: OnceLock::new(),
        })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    // ---- hashes and paths

    pub fn data_hash(&self, r: Regime) -> String {
        config_hash(&(&self.cfg.task, self.cfg.data.regime_config(r), self.cfg.data_seed(r)))
    }

    pub fn pretrain_hash(&self) -> String {
        let c = &self.cfg;
        config_hash(&(
            &c.task,
            &c.schedule,
            &c.architecture,
            c.phase_config(&c.train.pretrain),
            self.init_seed(),
        ))
    }

    pub fn finetune_hash(&self, m: Method, r: Regime) -> String {
        config_hash(&(self.pretrain_hash(), self.data_hash(r), m, m.train_config(&self.cfg)))
    }

    fn init_seed(&self) -> u64 {
        self.cfg.stream_seed(0)
    }

    pub fn data_path(&self, r: Regime) -> PathBuf {
        self.out.join("data").join(format!("{}-{}.jsonl", r.name(), self.data_hash(r)))
    }

    pub fn pretrain_path(&self) -> PathBuf {
        self.out.join("models").join(format!("pretrain-{}.ckpt", self.pretrain_hash()))
    }

    pub fn finetune_path(&self, m: Method, r: Regime) -> PathBuf {
        self.out
            .join("models")
            .join(format!("{}-{}-{}.ckpt", m.name(), r.name(), self.finetune_hash(m, r)))
    }

    pub fn model_path(&self, m: ModelRef) -> PathBuf {
        match m {
            ModelRef::Pretrained => self.pretrain_path(),
            ModelRef::Finetuned(m, r) => self.finetune_path(m, r),
        }
    }

    /// Output-directory-independent name of a model artifact.
    fn model_file(&self, m: ModelRef) -> String {
        self.model_path(m)
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    fn metrics_path(ckpt: &Path) -> PathBuf {
        ckpt.with_extension("metrics.csv")
    }

    // ---- run log (the only place wall-clock time is recorded)

    fn log_run(&self, what: &str, started: Instant, artifacts: &[PathBuf]) -> Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(&self.out)?;
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out.join("run.log"))?;
        let list: Vec<String> = artifacts.iter().map(|p| p.display().to_string()).collect();
        writeln!(
            f,
            "{now} {what} {:.2}s threads={} {}",
            started.elapsed().as_secs_f64(),
            parallel::current_threads(),
            list.join(" ")
        )?;
        Ok(())
    }

    // ---- data

    pub fn gen_data(&self, regimes: &[Regime]) -> Result<Outcome> {
        let started = Instant::now();
        let mut artifacts = Vec::new();
        let mut counts = Vec::new();
        for &r in regimes {
            let records = generate_pairs(&self.task, self.cfg.data.regime_config(r), self.cfg.data_seed(r))?;
            let path = self.data_path(r);
            create_parent(&path)?;
            write_pairs(&path, &records)?;
            counts.push(format!("{}={}", r.name(), records.len()));
            artifacts.push(path);
        }
        self.log_run("gen-data", started, &artifacts)?;
        Ok(Outcome {
            summary: format!("wrote preference pairs ({})", counts.join(", ")),
            artifacts,
            table: None,
        })
    }

    fn load_data(&self, r: Regime) -> Result<Vec<PreferenceRecord>> {
        let path = self.data_path(r);
        missing(&path, "gen-data")?;
        load_pairs(&path)
    }

    // ---- training

    fn save_run(&self, final_path: &Path, last: Option<Checkpoint>, fallback: Checkpoint, metrics: &[MetricsRow]) -> Result<()> {
        create_parent(final_path)?;
        last.unwrap_or(fallback).save(final_path)?;
        write_metrics_csv(&Self::metrics_path(final_path), metrics)
    }

    /// Sink writing cadence checkpoints under `checkpoints/` and keeping the last one.
    fn cadence_sink<'a>(
        &self,
        stem: String,
        last: &'a mut Option<Checkpoint>,
    ) -> Result<impl FnMut(u64, &Checkpoint) -> Result<()> + 'a> {
        let dir = self.out.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        Ok(move |step: u64, ck: &Checkpoint| {
            ck.save(&dir.join(format!("{stem}-step{step}.ckpt")))?;
            *last = Some(ck.clone());
            Ok(())
        })
    }

    pub fn pretrain(&self) -> Result<Outcome> {
        let started = Instant::now();
        let c = &self.cfg;
        let init = ConditionalField::new(c.architecture.clone(), c.mode(), self.init_seed())?;
        let path = self.pretrain_path();
        let mut last = None;
        let out = {
            let mut sink = self.cadence_sink(format!("pretrain-{}", self.pretrain_hash()), &mut last)?;
            training::pretrain(&self.task, init, &c.phase_config(&c.train.pretrain), &c.schedule, &mut sink)?
        };
        let fallback = Checkpoint::single(&out.model, Some(c.schedule.clone()));
        self.save_run(&path, last, fallback, &out.metrics)?;
        let artifacts = vec![path.clone(), Self::metrics_path(&path)];
        self.log_run("pretrain", started, &artifacts)?;
        let final_loss = out.metrics.last().map_or(out.initial.loss, |m| m.loss);
        Ok(Outcome {
            summary: format!(
                "pretrained {} steps, loss {} -> {} ({})",
                out.metrics.len(),
                fmt3(out.initial.loss),
                fmt3(final_loss),
                path.display()
            ),
            artifacts,
            table: None,
        })
    }

    fn load_pretrained(&self) -> Result<ConditionalField> {
        let path = self.pretrain_path();
        missing(&path, "pretrain")?;
        Checkpoint::load(&path)?.field("params")
    }

    pub fn finetune(&self, m: Method, r: Regime) -> Result<Outcome> {
        let started = Instant::now();
        let base = self.load_pretrained()?;
        let data = self.load_data(r)?;
        let tc = m.train_config(&self.cfg);
        let sc = &self.cfg.schedule;
        let path = self.finetune_path(m, r);
        let stem = format!("{}-{}-{}", m.name(), r.name(), self.finetune_hash(m, r));
        let mut last = None;
        let (fallback, metrics, initial) = {
            let mut sink = self.cadence_sink(stem, &mut last)?;
            match m {
                Method::Chats | Method::ChatsNoref => {
                    let o = training::finetune_chats(&base, &data, &tc, sc, &mut sink)?;
                    (Checkpoint::triple(&o.model, Some(sc.clone())), o.metrics, o.initial.loss)
                }
                Method::Dpo => {
                    let o = training::finetune_dpo(&base, &data, &tc, sc, &mut sink)?;
                    (Checkpoint::single(&o.model, Some(sc.clone())), o.metrics, o.initial.loss)
                }
                Method::SftFull | Method::SftPreferred => {
                    let o = training::finetune_standard(&base, &data, &tc, sc, &mut sink)?;
                    (Checkpoint::single(&o.model, Some(sc.clone())), o.metrics, o.initial.loss)
                }
            }
        };
        self.save_run(&path, last, fallback, &metrics)?;
        let artifacts = vec![path.clone(), Self::metrics_path(&path)];
        self.log_run(&format!("finetune {} {}", m.name(), r.name()), started, &artifacts)?;
        let final_loss = metrics.last().map_or(initial, |x| x.loss);
        Ok(Outcome {
            summary: format!(
                "finetuned {} on {} for {} steps, loss {} -> {} ({})",
                m.name(),
                r.name(),
                metrics.len(),
                fmt3(initial),
                fmt3(final_loss),
                path.display()
            ),
            artifacts,
            table: None,
        })
    }

    /// Trains `m` on `r` unless its artifact already exists.
    fn ensure_finetuned(&self, m: Method, r: Regime) -> Result<()> {
        if !self.finetune_path(m, r).exists() {
            self.finetune(m, r)?;
        }
        Ok(())
    }

    pub fn load_model(&self, m: ModelRef) -> Result<LoadedModel> {
        match m {
            ModelRef::Pretrained => Ok(LoadedModel::Single(self.load_pretrained()?)),
            ModelRef::Finetuned(method, r) => {
                let path = self.finetune_path(method, r);
                missing(&path, "finetune")?;
                let ck = Checkpoint::load(&path)?;
                if method.is_pair() {
                    Ok(LoadedModel::Triple(ck.to_triple()?))
                } else {
                    Ok(LoadedModel::Single(ck.field("params")?))
                }
            }
        }
    }

    // ---- sampling

    /// Default guidance for a model: the configured CHATS sampler for pairs,
    /// CFG at the baseline scale for single models.
    pub fn default_guidance(&self, m: ModelRef) -> GuidanceConfig {
        match m {
            ModelRef::Finetuned(method, _) if method.is_pair() => self.cfg.guidance,
            _ => GuidanceConfig {
                combiner: Combiner::Cfg,
                s: self.cfg.baseline_s,
                ..self.cfg.guidance
            },
        }
    }

    pub fn sample(&self, m: ModelRef, guidance: GuidanceConfig, cond: usize, n: usize) -> Result<Outcome> {
        let started = Instant::now();
        if cond >= self.task.num_conditions() {
            return Err(Error::UnknownCondition(cond));
        }
        guidance.validate(&self.sched)?;
        let model = self.load_model(m)?;
        let guided = model.guided();
        let seed = self.cfg.stream_seed(200);
        let seeds: Vec<u64> = (0..n as u64).map(|i| record_seed(seed, i)).collect();
        let zs = parallel::map_indexed(n, |i| sample(&guided, cond, &guidance, &self.sched, seeds[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let hash = config_hash(&(self.model_file(m), &guidance, cond, n, seed));
        let path = self.out.join("samples").join(format!("{hash}.csv"));
        create_parent(&path)?;
        let dims: String = (0..self.task.data_dim).map(|k| format!(",z{k}")).collect();
        let mut text = format!("cond,seed{dims},reward\n");
        let mut total = 0.0;
        for (z, s) in zs.iter().zip(&seeds) {
            let r = self.task.oracle_reward(cond, z)?;
            total += r;
            let coords: String = z.iter().map(|v| format!(",{v}")).collect();
            let _ = writeln!(text, "{cond},{s}{coords},{r}");
        }
        std::fs::write(&path, text)?;
        let artifacts = vec![path.clone()];
        self.log_run("sample", started, &artifacts)?;
        Ok(Outcome {
            summary: format!(
                "drew {n} samples for condition {cond}, mean reward {} ({})",
                fmt3(total / n.max(1) as f64),
                path.display()
            ),
            artifacts,
            table: None,
        })
    }

    // ---- evaluation

    fn reference(&self) -> Result<&ReferenceSet> {
        if let Some(r) = self.reference.get() {
            return Ok(r);
        }
        let r = ReferenceSet::build(&self.task, &self.cfg.eval)?;
        Ok(self.reference.get_or_init(|| r))
    }

    fn evaluate(&self, model: &LoadedModel, g: &GuidanceConfig) -> Result<ConfigEval> {
        evaluate_config(&model.guided(), g, &self.task, &self.sched, &self.cfg.eval, self.reference()?)
    }

    fn cfg_guidance(&self, s: f64) -> GuidanceConfig {
        GuidanceConfig {
            combiner: Combiner::Cfg,
            s,
            ..self.cfg.guidance
        }
    }

    /// Evaluates labelled rows and emits `{experiment}/{hash}.csv`.
    fn report(
        &self,
        experiment: &str,
        rows: Vec<(&str, ModelRef, GuidanceConfig)>,
        baselines: &[&str],
    ) -> Result<(ReportTable, PathBuf)> {
        let key = EvalKey {
            experiment,
            rows: rows
                .iter()
                .map(|(l, m, g)| (l.to_string(), self.model_file(*m), *g))
                .collect(),
            protocol: &self.cfg.eval,
            task: &self.cfg.task,
        };
        let path = self.out.join(experiment).join(format!("{}.csv", config_hash(&key)));
        // load everything first so a missing artifact fails before any sampling
        let models = rows
            .iter()
            .map(|(_, m, _)| self.load_model(*m))
            .collect::<Result<Vec<_>>>()?;
        let mut evals = Vec::with_capacity(rows.len());
        for ((_, _, g), model) in rows.iter().zip(&models) {
            evals.push(self.evaluate(model, g)?);
        }
        let base: Vec<(&str, &ConfigEval)> = baselines
            .iter()
            .map(|b| {
                let i = rows.iter().position(|r| r.0 == *b).expect("baseline is one of the rows");
                (*b, &evals[i])
            })
            .collect();
        let mut table = ReportTable::new(baselines);
        for ((label, _, g), e) in rows.iter().zip(&evals) {
            let alpha = (g.combiner != Combiner::Cfg && g.combiner != Combiner::None).then_some(g.alpha);
            let mut row = ReportRow::from_eval(label, g, alpha, e);
            row.compare(e, &base);
            table.rows.push(row);
        }
        create_parent(&path)?;
        std::fs::write(&path, table.to_csv())?;
        Ok((table, path))
    }

    fn summarise(table: &ReportTable) -> String {
        table
            .rows
            .iter()
            .map(|r| format!("{}={}", r.label, fmt3(r.mean_reward)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// CHATS against the pretrained and DPO baselines on the configured regime.
    pub fn eval_main(&self) -> Result<Outcome> {
        let started = Instant::now();
        let r = self.cfg.data.regime;
        let chats = ModelRef::Finetuned(Method::Chats, r);
        let proxy = GuidanceConfig {
            combiner: Combiner::ChatsProxy,
            ..self.cfg.guidance
        };
        let rows = vec![
            ("pretrained_cfg", ModelRef::Pretrained, self.cfg_guidance(self.cfg.baseline_s)),
            ("dpo_cfg", ModelRef::Finetuned(Method::Dpo, r), self.cfg_guidance(self.cfg.baseline_s)),
            ("chats", chats, self.cfg.guidance),
            ("chats_proxy", chats, proxy),
        ];
        let (table, path) = self.report("main", rows, &["pretrained_cfg", "dpo_cfg"])?;
        self.log_run("eval main", started, std::slice::from_ref(&path))?;
        Ok(Outcome {
            summary: format!("main: {} ({})", Self::summarise(&table), path.display()),
            artifacts: vec![path],
            table: Some(table),
        })
    }

    /// CHATS and DPO trained on each regime.
    pub fn eval_data_efficiency(&self) -> Result<Outcome> {
        let started = Instant::now();
        let cfg_g = self.cfg_guidance(self.cfg.baseline_s);
        let labels: Vec<String> = [Method::Chats, Method::Dpo]
            .iter()
            .flat_map(|m| Regime::ALL.map(|r| format!("{}_{}", m.name(), r.name())))
            .collect();
        let mut rows = vec![("pretrained_cfg", ModelRef::Pretrained, cfg_g)];
        let mut k = 0;
        for m in [Method::Chats, Method::Dpo] {
            for r in Regime::ALL {
                let g = if m.is_pair() { self.cfg.guidance } else { cfg_g };
                rows.push((labels[k].as_str(), ModelRef::Finetuned(m, r), g));
                k += 1;
            }
        }
        let (table, path) = self.report("data_efficiency", rows, &["pretrained_cfg"])?;
        self.log_run("eval data-efficiency", started, std::slice::from_ref(&path))?;
        Ok(Outcome {
            summary: format!("data-efficiency: {} ({})", Self::summarise(&table), path.display()),
            artifacts: vec![path],
            table: Some(table),
        })
    }

    /// Sweeps `alpha` or `s` of the configured CHATS sampler; writes CSV and SVG.
    pub fn sweep(&self, param: &str, values: &[f64]) -> Result<Outcome> {
        let started = Instant::now();
        if param != "alpha" && param != "s" {
            return Err(Error::Config {
                path: "param".into(),
                message: format!("unknown sweep parameter `{param}` (expected alpha or s)"),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config {
                path: "values".into(),
                message: format!("non-finite value {bad}"),
            });
        }
        let chats = ModelRef::Finetuned(Method::Chats, self.cfg.data.regime);
        let labels: Vec<String> = values.iter().map(|v| format!("{param}={v}")).collect();
        let mut rows = vec![("pretrained_cfg", ModelRef::Pretrained, self.cfg_guidance(self.cfg.baseline_s))];
        for (label, &v) in labels.iter().zip(values) {
            let mut g = self.cfg.guidance;
            if param == "alpha" {
                g.alpha = v;
            } else {
                g.s = v;
            }
            g.validate(&self.sched)?;
            rows.push((label.as_str(), chats, g));
        }
        let (mut table, full) = self.report("sweep", rows, &["pretrained_cfg"])?;
        table.rows.remove(0);
        let csv_path = full.with_extension("plot.csv");
        std::fs::write(&csv_path, table.to_sweep_csv(param))?;
        let svg_path = full.with_extension("svg");
        if table.rows.is_empty() {
            std::fs::write(&svg_path, plot::render_svg(&plot::Chart {
                x_label: param.to_string(),
                series: Vec::new(),
            }))?;
        } else {
            plot::plot_file(&csv_path, &svg_path)?;
        }
        let artifacts = vec![full, csv_path, svg_path];
        self.log_run("sweep", started, &artifacts)?;
        Ok(Outcome {
            summary: format!("sweep {param}: {} ({})", Self::summarise(&table), artifacts[0].display()),
            artifacts,
            table: Some(table),
        })
    }

    /// The five-row ablation matrix, training any missing finetunes from the
    /// shared pretrained checkpoint.
    pub fn ablate(&self) -> Result<Outcome> {
        let started = Instant::now();
        missing(&self.pretrain_path(), "pretrain")?;
        let r = self.cfg.data.regime;
        missing(&self.data_path(r), "gen-data")?;
        for m in [Method::SftFull, Method::SftPreferred, Method::ChatsNoref, Method::Chats] {
            self.ensure_finetuned(m, r)?;
        }
        let s = self.cfg.guidance.s;
        let rows = vec![
            ("single_full", ModelRef::Finetuned(Method::SftFull, r), self.cfg_guidance(s)),
            ("single_preferred", ModelRef::Finetuned(Method::SftPreferred, r), self.cfg_guidance(s)),
            ("two_models_noref", ModelRef::Finetuned(Method::ChatsNoref, r), self.cfg_guidance(s)),
            ("two_models", ModelRef::Finetuned(Method::Chats, r), self.cfg_guidance(s)),
            ("two_models_chats", ModelRef::Finetuned(Method::Chats, r), self.cfg.guidance),
        ];
        let (table, path) = self.report("ablation", rows, &["single_full"])?;
        self.log_run("ablate", started, std::slice::from_ref(&path))?;
        Ok(Outcome {
            summary: format!("ablation: {} ({})", Self::summarise(&table), path.display()),
            artifacts: vec![path],
            table: Some(table),
        })
    }
}
