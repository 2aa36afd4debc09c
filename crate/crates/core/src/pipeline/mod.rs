//! Config-driven orchestration: tokenize, pre-train, fine-tune, extract
//! prefixes, generate, filter, train n-grams, interpolate, evaluate.
//!
//! Each stage writes its outputs to `work_dir/<stage>-<key>/`, where the key
//! hashes the stage's settings, its parents' keys and the bytes of its input
//! files. A stage whose directory holds a `.done` marker is skipped, so an
//! interrupted run resumes where it stopped and a config change re-runs
//! exactly the affected stage and its descendants.

pub mod config;
pub mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::PipelineConfig;
pub use report::RunReport;

use crate::corpus::{extract_prefixes, read_lines, write_lines, Corpus, PrefixCorpus};
use crate::error::{Error, Result};
use crate::filter::{derive_thresholds, filter_texts, FilterReport};
use crate::generation::{generate_corpus, GenerationConfig, SyntheticCorpus};
use crate::interpolate::{flatten, optimize_weights_em, InterpolatedModel};
use crate::neural::{finetune, neural_perplexity, train, write_loss_log, NeuralLmCheckpoint, TrainHyper, TransformerConfig};
use crate::ngram::{read_arpa, train_ngram, write_arpa, NGramModel, Vocab};
use crate::rng::mix;
use crate::tokenizer::{learn_bpe, BpeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Bpe,
    Pretrain,
    Finetune,
    Scratch,
    Prefixes,
    Generate,
    Filter,
    Baseline,
    Ngram,
    Interpolate,
    Eval,
}

impl Stage {
    /// Every stage, parents before children.
    pub const ALL: [Stage; 11] = [
        Stage::Bpe,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Scratch,
        Stage::Prefixes,
        Stage::Generate,
        Stage::Filter,
        Stage::Baseline,
        Stage::Ngram,
        Stage::Interpolate,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Bpe => "bpe",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Scratch => "scratch",
            Stage::Prefixes => "prefixes",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Baseline => "baseline",
            Stage::Ngram => "ngram",
            Stage::Interpolate => "interpolate",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn parents(self) -> &'static [Stage] {
        match self {
            Stage::Bpe | Stage::Baseline => &[],
            Stage::Pretrain | Stage::Scratch | Stage::Prefixes => &[Stage::Bpe],
            Stage::Finetune => &[Stage::Bpe, Stage::Pretrain],
            Stage::Generate => &[Stage::Bpe, Stage::Finetune, Stage::Prefixes],
            Stage::Filter => &[Stage::Generate],
            Stage::Ngram => &[Stage::Filter, Stage::Baseline],
            Stage::Interpolate => &[Stage::Baseline, Stage::Ngram],
            Stage::Eval => &[Stage::Interpolate],
        }
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|&s| s == self).expect("listed") as u64
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn toml_of<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("settings serialize")
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub struct Pipeline {
    pub config: PipelineConfig,
    keys: HashMap<Stage, String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut input_hashes = HashMap::new();
        for p in [
            &config.paths.general,
            &config.paths.in_domain_train,
            &config.paths.in_domain_dev,
            &config.paths.in_domain_test,
        ] {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            input_hashes.insert(p.clone(), sha_hex(&bytes));
        }
        let mut pipeline = Self {
            config,
            keys: HashMap::new(),
        };
        for stage in Stage::ALL {
            let mut material = pipeline.stage_settings(stage);
            for parent in stage.parents() {
                let _ = writeln!(material, "parent {} {}", parent.name(), pipeline.keys[parent]);
            }
            for input in pipeline.inputs(stage) {
                let _ = writeln!(material, "input {}", input_hashes[&input]);
            }
            pipeline.keys.insert(stage, sha_hex(material.as_bytes()));
        }
        Ok(pipeline)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(PipelineConfig::load(path)?)
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        mix(self.config.seed, stage.index() + 1)
    }

    fn enabled(&self, stage: Stage) -> bool {
        stage != Stage::Scratch || self.config.neural.train_scratch
    }

    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let p = &self.config.paths;
        match stage {
            Stage::Bpe => vec![p.general.clone(), p.in_domain_train.clone()],
            Stage::Pretrain => vec![p.general.clone()],
            Stage::Finetune | Stage::Scratch => vec![p.in_domain_train.clone(), p.in_domain_dev.clone()],
            Stage::Prefixes | Stage::Filter => vec![p.in_domain_train.clone()],
            Stage::Baseline if self.config.ngram.include_general => vec![p.in_domain_train.clone(), p.general.clone()],
            Stage::Baseline => vec![p.in_domain_train.clone()],
            Stage::Interpolate => vec![p.in_domain_dev.clone()],
            Stage::Generate | Stage::Ngram | Stage::Eval => Vec::new(),
        }
    }

    fn stage_settings(&self, stage: Stage) -> String {
        let c = &self.config;
        let body = match stage {
            Stage::Bpe => toml_of(&c.tokenizer),
            Stage::Pretrain => format!("{}\n{}", toml_of(&c.neural.model), toml_of(&c.neural.pretrain)),
            Stage::Finetune | Stage::Scratch => format!("{}\n{}", toml_of(&c.neural.model), toml_of(&c.neural.finetune)),
            Stage::Prefixes => toml_of(&c.prefixes),
            Stage::Generate => toml_of(&c.generation),
            Stage::Filter => toml_of(&c.filter),
            Stage::Baseline => format!(
                "order = {}\ncutoffs = {:?}\ninclude_general = {}\n",
                c.ngram.order, c.ngram.cutoffs, c.ngram.include_general
            ),
            Stage::Ngram => toml_of(&c.ngram),
            Stage::Interpolate => toml_of(&c.interpolate),
            Stage::Eval => String::new(),
        };
        format!("stage = {}\nseed = {}\n{body}", stage.name(), self.seed(stage))
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config
            .paths
            .work_dir
            .join(format!("{}-{}", stage.name(), &self.keys[&stage][..16]))
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(".done").is_file()
    }

    /// `target` and its ancestors, parents first.
    fn closure(&self, target: Stage) -> Vec<Stage> {
        let mut need = BTreeSet::new();
        let mut stack = vec![target];
        while let Some(s) = stack.pop() {
            if need.insert(s) {
                stack.extend_from_slice(s.parents());
            }
        }
        if target == Stage::Eval && self.enabled(Stage::Scratch) {
            need.insert(Stage::Scratch);
        }
        need.into_iter().filter(|&s| self.enabled(s)).collect()
    }

    /// Runs every stage needed for `target` (all stages when `None`) and,
    /// when the target is evaluation, writes `report.txt`, `report.toml` and
    /// `timings.txt` to the work directory. `force` re-runs the target
    /// stage even if it is complete.
    pub fn run(&self, target: Option<Stage>, force: bool) -> Result<RunReport> {
        let target = target.unwrap_or(Stage::Eval);
        std::fs::create_dir_all(&self.config.paths.work_dir).map_err(|e| Error::io(&self.config.paths.work_dir, e))?;
        let mut timings = Vec::new();
        for stage in self.closure(target) {
            if stage == Stage::Eval {
                continue;
            }
            let dir = self.stage_dir(stage);
            if self.is_done(stage) && !(force && stage == target) {
                let secs = read_file(&dir.join("timing.txt"))
                    .ok()
                    .and_then(|t| t.trim().parse().ok())
                    .unwrap_or(0.0);
                timings.push((stage.name().to_string(), secs));
                continue;
            }
            let tmp = dir.with_extension("tmp");
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            }
            std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let start = Instant::now();
            self.execute(stage, &tmp).map_err(stage_err(stage))?;
            let secs = start.elapsed().as_secs_f64();
            write_file(&tmp.join("timing.txt"), format!("{secs:.3}\n"))?;
            write_file(&tmp.join(".done"), self.stage_settings(stage))?;
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            std::fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
            timings.push((stage.name().to_string(), secs));
        }
        if target != Stage::Eval {
            return Ok(RunReport {
                timings,
                ..Default::default()
            });
        }
        let start = Instant::now();
        let mut report = self.eval_report().map_err(stage_err(Stage::Eval))?;
        timings.push(("eval".to_string(), start.elapsed().as_secs_f64()));
        report.timings = timings;
        let work = &self.config.paths.work_dir;
        write_file(&work.join("report.txt"), report.to_text())?;
        write_file(&work.join("report.toml"), report.to_toml())?;
        write_file(&work.join("timings.txt"), report.timings_text())?;
        Ok(report)
    }

    fn lines(&self, path: &Path) -> Result<Vec<String>> {
        read_lines(path)
    }

    fn tokenizer(&self) -> Result<BpeModel> {
        let dir = self.stage_dir(Stage::Bpe);
        BpeModel::load(&dir.join("merges.txt"), &dir.join("vocab.txt"))
    }

    fn model_config(&self, tokenizer: &BpeModel) -> TransformerConfig {
        TransformerConfig {
            vocab_size: tokenizer.vocab_size(),
            ..self.config.neural.model.clone()
        }
    }

    fn hyper(&self, base: &TrainHyper, stage: Stage) -> TrainHyper {
        TrainHyper {
            seed: self.seed(stage),
            ..base.clone()
        }
    }

    fn checkpoint(&self, stage: Stage) -> Result<NeuralLmCheckpoint> {
        NeuralLmCheckpoint::load(&self.stage_dir(stage).join("checkpoint.bin"))
    }

    fn ngram_vocab(&self) -> Result<Vocab> {
        let words = read_lines(&self.stage_dir(Stage::Baseline).join("vocab.txt"))?;
        Ok(Vocab::from_words(words))
    }

    fn cutoffs(&self) -> Vec<u64> {
        self.config.ngram.cutoffs.clone()
    }

    fn save_training(&self, dir: &Path, outcome: &crate::neural::TrainOutcome) -> Result<()> {
        outcome.checkpoint.save(&dir.join("checkpoint.bin"))?;
        write_loss_log(&dir.join("loss.csv"), &outcome.log)?;
        let mut dev = String::from("step,dev_ppl\n");
        for (step, ppl) in &outcome.dev_log {
            let _ = writeln!(dev, "{step},{ppl}");
        }
        write_file(&dir.join("dev.csv"), dev)
    }

    fn execute(&self, stage: Stage, out: &Path) -> Result<()> {
        let cfg = &self.config;
        let paths = &cfg.paths;
        match stage {
            Stage::Bpe => {
                let mut lines = self.lines(&paths.general)?;
                lines.extend(self.lines(&paths.in_domain_train)?);
                let tok = learn_bpe(&lines, cfg.tokenizer.num_merges)?;
                tok.save(&out.join("merges.txt"), &out.join("vocab.txt"))
            }
            Stage::Pretrain => {
                let tok = self.tokenizer()?;
                // early stopping watches held-out general text; in-domain dev
                // perplexity of a general model says little about progress
                let lines = self.lines(&paths.general)?;
                let held = if lines.len() < 20 { 0 } else { (lines.len() / 100).clamp(1, 2000) };
                let (fit, held_out) = lines.split_at(lines.len() - held);
                let general = Corpus::from_lines(fit, &tok, "general");
                let dev = Corpus::from_lines(held_out, &tok, "general held-out");
                let dev = (!dev.is_empty()).then_some(dev);
                let init = NeuralLmCheckpoint::init(&self.model_config(&tok), mix(cfg.seed, 100))?;
                let outcome = train(&init, &general, dev.as_ref(), &self.hyper(&cfg.neural.pretrain, stage))?;
                self.save_training(out, &outcome)
            }
            Stage::Finetune => {
                let tok = self.tokenizer()?;
                let pretrained = self.checkpoint(Stage::Pretrain)?;
                let train_c = Corpus::from_lines(&self.lines(&paths.in_domain_train)?, &tok, "train");
                let dev = Corpus::from_lines(&self.lines(&paths.in_domain_dev)?, &tok, "dev");
                let hyper = self.hyper(&cfg.neural.finetune, stage);
                let outcome = finetune(&pretrained, &self.model_config(&tok), &train_c, Some(&dev), &hyper)?;
                self.save_training(out, &outcome)
            }
            Stage::Scratch => {
                let tok = self.tokenizer()?;
                let train_c = Corpus::from_lines(&self.lines(&paths.in_domain_train)?, &tok, "train");
                let dev = Corpus::from_lines(&self.lines(&paths.in_domain_dev)?, &tok, "dev");
                let init = NeuralLmCheckpoint::init(&self.model_config(&tok), mix(cfg.seed, 101))?;
                let outcome = train(&init, &train_c, Some(&dev), &self.hyper(&cfg.neural.finetune, stage))?;
                self.save_training(out, &outcome)
            }
            Stage::Prefixes => {
                let tok = self.tokenizer()?;
                let train_c = Corpus::from_lines(&self.lines(&paths.in_domain_train)?, &tok, "train");
                let ks: BTreeSet<usize> = cfg.prefixes.k_values.iter().copied().collect();
                let prefixes = extract_prefixes(&train_c, &tok, &ks, cfg.prefixes.max_per_k, self.seed(stage))?;
                prefixes.save(&out.join("prefixes.txt"), &out.join("prefixes.k"), &tok)
            }
            Stage::Generate => {
                let tok = self.tokenizer()?;
                let ckpt = self.checkpoint(Stage::Finetune)?;
                let pdir = self.stage_dir(Stage::Prefixes);
                let prefixes = PrefixCorpus::load(&pdir.join("prefixes.txt"), &pdir.join("prefixes.k"), &tok)?;
                let g = &cfg.generation;
                let mut all = SyntheticCorpus::default();
                for (i, &temperature) in g.temperatures.iter().enumerate() {
                    let gen_cfg = GenerationConfig {
                        temperature,
                        samples_per_prefix: g.samples_per_prefix,
                        keep_top: g.keep_top,
                        length_penalty: g.length_penalty,
                        max_new_tokens: g.max_new_tokens,
                        seed: mix(self.seed(stage), i as u64),
                    };
                    all.extend(generate_corpus(&ckpt, &tok, &prefixes, &gen_cfg)?);
                }
                all.save(&out.join("synthetic.txt"), &out.join("synthetic.tsv"), &tok)
            }
            Stage::Filter => {
                let raw = std::fs::read(self.stage_dir(Stage::Generate).join("synthetic.txt"))
                    .map_err(|e| Error::io(self.stage_dir(Stage::Generate).join("synthetic.txt"), e))?;
                let texts = crate::corpus::split_utf8_lines(&raw)?;
                let f = &cfg.filter;
                let mut rules = derive_thresholds(&self.lines(&paths.in_domain_train)?, f.quantiles[0], f.quantiles[1])?;
                if !f.use_vocab {
                    rules.vocab = None;
                }
                rules.max_oov_per_sentence = f.max_oov_per_sentence;
                let set = |w: &Vec<String>| (!w.is_empty()).then(|| w.iter().cloned().collect());
                rules.required_keywords = set(&f.required_keywords);
                rules.banned_keywords = set(&f.banned_keywords);
                rules.max_duplicates = f.max_duplicates;
                rules.validate()?;
                let (kept, report) = filter_texts(&texts, &rules);
                let kept: Vec<&str> = kept.iter().map(|&i| texts[i].as_str()).collect();
                write_lines(&out.join("filtered.txt"), &kept)?;
                write_file(&out.join("filter_report.txt"), report.to_string())
            }
            Stage::Baseline => {
                let train_lines = self.lines(&paths.in_domain_train)?;
                let general = if cfg.ngram.include_general {
                    Some(self.lines(&paths.general)?)
                } else {
                    None
                };
                let mut sources: Vec<&[String]> = vec![&train_lines];
                if let Some(g) = &general {
                    sources.push(g);
                }
                let vocab = Vocab::from_sentences(sources);
                write_lines(&out.join("vocab.txt"), &vocab.words()[3..])?;
                let order = cfg.ngram.order;
                let baseline = train_ngram(&train_lines, &vocab, order, &self.cutoffs())?;
                write_arpa(&baseline, &out.join("baseline.arpa"))?;
                if let Some(g) = &general {
                    write_arpa(&train_ngram(g, &vocab, order, &self.cutoffs())?, &out.join("general.arpa"))?;
                }
                Ok(())
            }
            Stage::Ngram => {
                let vocab = self.ngram_vocab()?;
                let mut lines = read_lines(&self.stage_dir(Stage::Filter).join("filtered.txt"))?;
                if let Some(max) = cfg.ngram.synthetic_max_sentences {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed(stage));
                    lines.shuffle(&mut rng);
                    lines.truncate(max);
                }
                if lines.is_empty() {
                    return Err(Error::Empty("filtered synthetic corpus"));
                }
                write_file(&out.join("used.txt"), format!("{}\n", lines.len()))?;
                let model = train_ngram(&lines, &vocab, cfg.ngram.order, &self.cutoffs())?;
                write_arpa(&model, &out.join("synthetic.arpa"))
            }
            Stage::Interpolate => {
                let (names, components) = self.components()?;
                let dev = self.lines(&paths.in_domain_dev)?;
                let em = optimize_weights_em(&components, &dev, cfg.interpolate.tol, cfg.interpolate.max_iters)?;
                let mut w = String::new();
                for (n, x) in names.iter().zip(&em.weights) {
                    let _ = writeln!(w, "{n}\t{x:?}");
                }
                write_file(&out.join("weights.txt"), w)?;
                let mut log = String::from("iteration,dev_log_likelihood\n");
                for (i, ll) in em.log_likelihoods.iter().enumerate() {
                    let _ = writeln!(log, "{i},{ll}");
                }
                write_file(&out.join("em.csv"), log)?;
                let mixture = InterpolatedModel::new(components, em.weights)?;
                write_arpa(&flatten(&mixture), &out.join("interpolated.arpa"))
            }
            Stage::Eval => Ok(()),
        }
    }

    fn components(&self) -> Result<(Vec<String>, Vec<NGramModel>)> {
        let base = self.stage_dir(Stage::Baseline);
        let mut names = vec!["baseline".to_string(), "synthetic".to_string()];
        let mut models = vec![
            read_arpa(&base.join("baseline.arpa"))?,
            read_arpa(&self.stage_dir(Stage::Ngram).join("synthetic.arpa"))?,
        ];
        if self.config.ngram.include_general {
            names.push("general".to_string());
            models.push(read_arpa(&base.join("general.arpa"))?);
        }
        Ok((names, models))
    }

    fn read_weights(&self) -> Result<Vec<(String, f64)>> {
        let path = self.stage_dir(Stage::Interpolate).join("weights.txt");
        let text = read_file(&path)?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (name, w) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path.display(), n + 1, "expected name<TAB>weight"))?;
            let w: f64 = w.parse().map_err(|_| Error::parse(path.display(), n + 1, "bad weight"))?;
            out.push((name.to_string(), w));
        }
        Ok(out)
    }

    /// Recomputes every perplexity that the completed stages allow, without
    /// training anything.
    pub fn eval_report(&self) -> Result<RunReport> {
        let done: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|&s| s != Stage::Eval && self.enabled(s) && self.is_done(s))
            .collect();
        if done.is_empty() {
            let missing = Stage::ALL
                .into_iter()
                .filter(|&s| s != Stage::Eval && self.enabled(s))
                .map(|s| self.stage_dir(s).display().to_string())
                .collect();
            return Err(Error::MissingArtifacts(missing));
        }
        let paths = &self.config.paths;
        let dev = self.lines(&paths.in_domain_dev)?;
        let test = self.lines(&paths.in_domain_test)?;
        let mut r = RunReport::default();
        r.corpus_sizes.insert("general".into(), self.lines(&paths.general)?.len());
        r.corpus_sizes.insert("in_domain_train".into(), self.lines(&paths.in_domain_train)?.len());
        r.corpus_sizes.insert("in_domain_dev".into(), dev.len());
        r.corpus_sizes.insert("in_domain_test".into(), test.len());
        let is = |s: Stage| done.contains(&s);

        if is(Stage::Prefixes) {
            let n = read_lines(&self.stage_dir(Stage::Prefixes).join("prefixes.k"))?.len();
            r.corpus_sizes.insert("prefixes".into(), n);
        }
        if is(Stage::Generate) {
            let meta = read_file(&self.stage_dir(Stage::Generate).join("synthetic.tsv"))?;
            r.corpus_sizes.insert("generated".into(), meta.lines().count().saturating_sub(1));
        }
        if is(Stage::Filter) {
            let text = read_file(&self.stage_dir(Stage::Filter).join("filter_report.txt"))?;
            let f = FilterReport::parse(&text)?;
            r.corpus_sizes.insert("filtered".into(), f.output);
            r.filter = Some(f);
        }
        if is(Stage::Ngram) {
            let used = read_file(&self.stage_dir(Stage::Ngram).join("used.txt"))?;
            let used = used
                .trim()
                .parse()
                .map_err(|_| Error::parse("used.txt", 1, "expected a count"))?;
            r.corpus_sizes.insert("synthetic_used".into(), used);
        }

        if is(Stage::Bpe) {
            let tok = self.tokenizer()?;
            let dev_c = Corpus::from_lines(&dev, &tok, "dev");
            let test_c = Corpus::from_lines(&test, &tok, "test");
            for (stage, name) in [
                (Stage::Pretrain, "pretrained"),
                (Stage::Finetune, "finetuned"),
                (Stage::Scratch, "scratch"),
            ] {
                if is(stage) {
                    let ckpt = self.checkpoint(stage)?;
                    r.neural_ppl.insert(format!("{name}_dev"), neural_perplexity(&ckpt.params, &dev_c)?);
                    r.neural_ppl.insert(format!("{name}_test"), neural_perplexity(&ckpt.params, &test_c)?);
                }
            }
        }

        let mut ngram = |name: &str, model: &NGramModel| -> Result<()> {
            r.ngram_ppl.insert(format!("{name}_dev"), model.perplexity(&dev)?);
            r.ngram_ppl.insert(format!("{name}_test"), model.perplexity(&test)?);
            Ok(())
        };
        if is(Stage::Baseline) {
            let base = self.stage_dir(Stage::Baseline);
            ngram("baseline", &read_arpa(&base.join("baseline.arpa"))?)?;
            if self.config.ngram.include_general {
                ngram("general", &read_arpa(&base.join("general.arpa"))?)?;
            }
        }
        if is(Stage::Ngram) {
            ngram("synthetic", &read_arpa(&self.stage_dir(Stage::Ngram).join("synthetic.arpa"))?)?;
        }
        if is(Stage::Interpolate) {
            ngram("flattened", &read_arpa(&self.stage_dir(Stage::Interpolate).join("interpolated.arpa"))?)?;
            let weights = self.read_weights()?;
            let (_, components) = self.components()?;
            let mixture = InterpolatedModel::new(components, weights.iter().map(|w| w.1).collect())?;
            r.ngram_ppl.insert("interpolated_dev".into(), mixture.perplexity(&dev)?);
            r.ngram_ppl.insert("interpolated_test".into(), mixture.perplexity(&test)?);
            r.weights = weights;
        }
        Ok(r)
    }

    /// Paths of the ARPA files written so far, keyed by model name.
    pub fn arpa_files(&self) -> BTreeMap<String, PathBuf> {
        let mut out = BTreeMap::new();
        for (stage, file) in [
            (Stage::Baseline, "baseline.arpa"),
            (Stage::Baseline, "general.arpa"),
            (Stage::Ngram, "synthetic.arpa"),
            (Stage::Interpolate, "interpolated.arpa"),
        ] {
            let p = self.stage_dir(stage).join(file);
            if p.is_file() {
                out.insert(file.trim_end_matches(".arpa").to_string(), p);
            }
        }
        out
    }
}
