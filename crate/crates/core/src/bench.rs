//! Synthetic two-domain data and the desk benchmark.
//!
//! The general domain is a broad template grammar over everyday topics; the
//! in-domain task is a flight-enquiry grammar that shares most of its slot
//! vocabulary. Template syntax: `{slot}` picks a slot filler (itself a template), `[..]` is
//! optional (kept with probability one half), `(a|b)` picks one alternative.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::write_lines;
use crate::error::{Error, Result};
use crate::neural::{TrainHyper, TransformerConfig};
use crate::pipeline::config::{
    FilterSection, GenerationSection, InterpolateSection, NeuralSection, NgramSection, Paths, PrefixSection,
    TokenizerSection,
};
use crate::pipeline::{Pipeline, PipelineConfig, RunReport};
use crate::rng::mix;

const SLOTS: &[(&str, &[&str])] = &[
    (
        "city",
        &[
            "boston", "denver", "atlanta", "dallas", "chicago", "seattle", "miami", "houston", "phoenix",
            "detroit", "new york", "san francisco", "los angeles", "salt lake city", "las vegas", "portland",
            "baltimore", "pittsburgh", "oakland", "memphis", "nashville", "orlando", "tampa", "cleveland",
            "milwaukee", "st louis", "kansas city", "minneapolis", "charlotte", "philadelphia", "austin",
            "san diego", "san jose", "columbus", "indianapolis", "cincinnati", "sacramento", "albuquerque",
            "tucson", "omaha", "tulsa", "raleigh", "richmond", "buffalo", "rochester", "hartford", "newark",
            "anchorage", "honolulu", "boise", "spokane", "reno", "el paso", "fort worth", "new orleans",
            "louisville", "birmingham", "jacksonville", "savannah", "toronto", "montreal", "vancouver",
        ],
    ),
    ("day", &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]),
    ("tod", &["morning", "afternoon", "evening", "night"]),
    (
        "num",
        &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"],
    ),
    ("ampm", &["am", "pm", "o'clock"]),
    ("clock", &["{num} {ampm}", "{num} {ampm}", "noon", "midnight", "{num} thirty"]),
    (
        "when",
        &[
            "on {day}", "on {day} {tod}", "in the {tod}", "on {month} {ordinal}", "this {day}", "next {day}",
            "tomorrow {tod}", "{day} {tod}",
        ],
    ),
    (
        "airline",
        &[
            "united", "delta", "american", "continental", "northwest", "alaska", "southwest", "us air",
            "jetblue", "frontier", "spirit", "lufthansa", "air canada", "british airways",
        ],
    ),
    ("class", &["first class", "business class", "economy", "coach"]),
    ("meal", &["breakfast", "lunch", "dinner", "a snack"]),
    (
        "month",
        &[
            "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
            "november", "december",
        ],
    ),
    (
        "ordinal",
        &[
            "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
            "twelfth", "fifteenth", "twentieth", "twenty first", "thirtieth",
        ],
    ),
    (
        "person",
        &["my sister", "the mayor", "our neighbor", "a friend", "the teacher", "my boss", "the doctor", "my father"],
    ),
    ("weather", &["sunny", "cold", "rainy", "windy", "warm", "cloudy", "snowy", "foggy"]),
    ("team", &["tigers", "bears", "eagles", "lions", "sharks", "rockets"]),
    ("item", &["car", "phone", "house", "bicycle", "computer", "coat", "ticket", "suitcase"]),
    ("place", &["museum", "library", "airport", "station", "hotel", "park", "stadium"]),
    ("adj", &["cheap", "expensive", "new", "old", "small", "large", "quiet", "busy"]),
    ("superl", &["cheapest", "earliest", "latest", "shortest", "fastest"]),
    (
        "fmod",
        &[
            "{when}", "on {airline}", "before {clock}", "after {clock}", "with a stop in {city}",
            "for {num} people", "in {class}", "that serves {meal}", "leaving {when}", "arriving {when}",
        ],
    ),
];

const IN_DOMAIN: &[&str] = &[
    "i want to fly from {city} to {city} [{fmod}] [{fmod}]",
    "show me [all] [the] flights from {city} to {city} [{fmod}] [{fmod}]",
    "what flights leave {city} [{when}] [after {clock}]",
    "list [all] {airline} flights from {city} to {city} [{fmod}]",
    "i need a {class} ticket from {city} to {city} [{when}]",
    "what is the {superl} flight from {city} to {city} [{fmod}]",
    "does {airline} have a flight from {city} to {city} [{fmod}]",
    "how much is a {class} ticket (to|from) {city} [{when}]",
    "i would like to book a flight to {city} [{fmod}] [{fmod}]",
    "what time does the (first|last) flight from {city} arrive in {city} [{when}]",
    "are there any [nonstop] flights from {city} to {city} [{fmod}]",
    "give me the flights from {city} to {city} [{fmod}] [{fmod}]",
    "which airlines fly from {city} to {city} [{when}]",
    "what ground transportation is available (in|at) {city} [airport]",
    "please find a round trip from {city} to {city} [returning {when}]",
    "show me the fares from {city} to {city} [{fmod}]",
    "i need to get to {city} by {clock} {when}",
    "what is the fare for a {class} flight from {city} to {city}",
    "list flights from {city} to {city} that (leave|arrive) (before|after) {clock} [{when}]",
    "is there {meal} served on the {airline} flight to {city}",
    "what (flights|airlines) go from {city} to {city} [with a stop in {city}]",
    "i want a one way ticket to {city} [{when}]",
];

const GENERAL: &[&str] = &[
    "the weather in {city} [{when}] will be {weather}",
    "{person} moved (to|from) {city} in {month}",
    "the {team} beat the {team} {num} to {num} [{when}]",
    "traffic in {city} was heavy [{when}]",
    "{person} said the meeting would start at {clock} [{when}]",
    "the train from {city} to {city} was delayed [by {num} hours] [{when}]",
    "we had {meal} with {person} [in {city}] [{when}]",
    "{airline} reported (higher|lower) profits in {month}",
    "{airline} will add [nonstop] flights from {city} to {city} [{when}]",
    "the {place} in {city} opens at {clock} [{when}]",
    "i want to buy a {adj} {item}",
    "the price of a {class} ticket rose [again] in {month}",
    "{person} flew from {city} to {city} [{when}] [on {airline}]",
    "show me the news from {city}",
    "what is the {superl} way to get to {city}",
    "is the {place} (open|closed) [{when}]",
    "{person} bought a {adj} {item} in {city}",
    "the bus to the {place} leaves at {clock} [{when}]",
    "i would like to visit {city} [{when}]",
    "{person} has a {adj} {item} and a {adj} {item}",
    "what time does the {place} close [{when}]",
    "the {ordinal} game of the season is in {city} [{when}]",
    "there is a {adj} {place} near the {place}",
    "it was {weather} in {city} [all week]",
    "the flight to {city} was (full|late|cancelled) [{when}]",
    "please tell {person} that i will be late",
    "how much does a {adj} {item} cost in {city}",
    "i need a ride to the airport [{when}]",
    "the {superl} train to {city} leaves at {clock}",
];

fn slot(name: &str) -> &'static [&'static str] {
    SLOTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| panic!("unknown slot {name}"))
}

/// Index of the bracket closing the one at `open`.
fn matching(chars: &[char], open: usize) -> usize {
    let mut depth = 0;
    for (i, &c) in chars.iter().enumerate().skip(open) {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    panic!("unbalanced template")
}

fn expand(chars: &[char], rng: &mut impl Rng, out: &mut String) {
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '{' => {
                let end = i + chars[i..].iter().position(|&c| c == '}').expect("closed slot");
                let name: String = chars[i + 1..end].iter().collect();
                let filler: Vec<char> = slot(&name).choose(rng).expect("non-empty slot").chars().collect();
                expand(&filler, rng, out);
                i = end + 1;
            }
            '[' => {
                let end = matching(chars, i);
                if rng.gen_bool(0.5) {
                    expand(&chars[i + 1..end], rng, out);
                }
                i = end + 1;
            }
            '(' => {
                let end = matching(chars, i);
                let inner = &chars[i + 1..end];
                let mut parts = Vec::new();
                let (mut depth, mut start) = (0, 0);
                for (j, &c) in inner.iter().enumerate() {
                    match c {
                        '[' | '(' => depth += 1,
                        ']' | ')' => depth -= 1,
                        '|' if depth == 0 => {
                            parts.push(&inner[start..j]);
                            start = j + 1;
                        }
                        _ => {}
                    }
                }
                parts.push(&inner[start..]);
                expand(parts.choose(rng).expect("alternatives"), rng, out);
                i = end + 1;
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
}

/// One sentence from a template list, whitespace-normalized.
pub fn sample_sentence(templates: &[&str], rng: &mut impl Rng) -> String {
    let t: Vec<char> = templates.choose(rng).expect("templates").chars().collect();
    let mut s = String::new();
    expand(&t, rng, &mut s);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataConfig {
    pub general: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            general: 200_000,
            train: 2000,
            dev: 500,
            test: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub general: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            general: dir.join("general.txt"),
            train: dir.join("in_domain_train.txt"),
            dev: dir.join("in_domain_dev.txt"),
            test: dir.join("in_domain_test.txt"),
        }
    }
}

/// Writes the general corpus and in-domain train, dev and test splits to
/// `dir`. Dev and test sentences never occur in train or in each other.
pub fn write_synthetic_data(dir: &Path, cfg: &SynthDataConfig) -> Result<DataPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DataPaths::in_dir(dir);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1));
    let general: Vec<String> = (0..cfg.general).map(|_| sample_sentence(GENERAL, &mut rng)).collect();
    write_lines(&paths.general, &general)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2));
    let train: Vec<String> = (0..cfg.train).map(|_| sample_sentence(IN_DOMAIN, &mut rng)).collect();
    let mut seen: HashSet<String> = train.iter().cloned().collect();
    let mut held_out = |n: usize| -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(n);
        let mut tries = 0;
        while out.len() < n {
            tries += 1;
            if tries > 1000 * (n + 1) {
                return Err(Error::Config("grammar too small for disjoint splits".into()));
            }
            let s = sample_sentence(IN_DOMAIN, &mut rng);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    };
    let dev = held_out(cfg.dev)?;
    let test = held_out(cfg.test)?;
    write_lines(&paths.train, &train)?;
    write_lines(&paths.dev, &dev)?;
    write_lines(&paths.test, &test)?;
    Ok(paths)
}

/// Size knobs of the benchmark. `desk` is the full run; `smoke` finishes in
/// seconds and exercises the same code.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchScale {
    pub data: SynthDataConfig,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub samples_per_prefix: usize,
    pub keep_top: usize,
    pub max_per_k: usize,
    /// Synthetic subset sizes compared against each other, ascending.
    pub synthetic_sizes: Vec<usize>,
}

impl BenchScale {
    pub fn desk() -> Self {
        Self {
            data: SynthDataConfig::default(),
            pretrain_steps: 3000,
            finetune_steps: 600,
            samples_per_prefix: 64,
            keep_top: 32,
            max_per_k: 5000,
            synthetic_sizes: vec![50_000, 200_000],
        }
    }

    pub fn smoke() -> Self {
        Self {
            data: SynthDataConfig {
                general: 2000,
                train: 300,
                dev: 60,
                test: 60,
                seed: 0,
            },
            pretrain_steps: 60,
            finetune_steps: 30,
            samples_per_prefix: 4,
            keep_top: 2,
            max_per_k: 40,
            synthetic_sizes: vec![500, 2000],
        }
    }
}

/// Pipeline settings used by the benchmark.
pub fn bench_config(data: &DataPaths, work_dir: &Path, seed: u64, scale: &BenchScale) -> PipelineConfig {
    let hyper = |steps: u64, lr: f64| TrainHyper {
        learning_rate: lr,
        total_steps: steps,
        batch_size: 32,
        eval_every: (steps / 10).max(1),
        patience: 3,
        ..TrainHyper::default()
    };
    PipelineConfig {
        seed,
        paths: Paths {
            general: data.general.clone(),
            in_domain_train: data.train.clone(),
            in_domain_dev: data.dev.clone(),
            in_domain_test: data.test.clone(),
            work_dir: work_dir.to_path_buf(),
        },
        tokenizer: TokenizerSection { num_merges: 500 },
        neural: NeuralSection {
            model: TransformerConfig {
                n_blocks: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
                max_seq_len: 48,
                vocab_size: 0,
                dropout_rate: 0.1,
                tie_embeddings: true,
            },
            pretrain: hyper(scale.pretrain_steps, 3e-3),
            finetune: hyper(scale.finetune_steps, 1e-3),
            train_scratch: true,
        },
        prefixes: PrefixSection {
            k_values: vec![1, 2, 3, 4, 5, 6],
            max_per_k: scale.max_per_k,
        },
        generation: GenerationSection {
            temperatures: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
            samples_per_prefix: scale.samples_per_prefix,
            keep_top: scale.keep_top,
            length_penalty: 1.0,
            max_new_tokens: 40,
        },
        filter: FilterSection::default(),
        ngram: NgramSection {
            order: 4,
            cutoffs: Vec::new(),
            include_general: false,
            synthetic_max_sentences: scale.synthetic_sizes.first().copied(),
        },
        interpolate: InterpolateSection::default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub scratch_test: f64,
    pub finetuned_test: f64,
    pub baseline_test: f64,
    /// (synthetic sentences used, interpolated test perplexity), ascending.
    pub interpolated_test: Vec<(usize, f64)>,
    pub reports: Vec<RunReport>,
}

impl SeedResult {
    pub fn finetune_beats_scratch(&self) -> bool {
        self.finetuned_test < self.scratch_test
    }

    /// Relative improvement of the largest interpolated model over the
    /// in-domain baseline.
    pub fn interpolation_gain(&self) -> f64 {
        let best = self.interpolated_test.last().map_or(f64::NAN, |x| x.1);
        1.0 - best / self.baseline_test
    }

    pub fn more_data_does_not_hurt(&self) -> bool {
        self.interpolated_test.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}

fn metric(table: &std::collections::BTreeMap<String, f64>, key: &str) -> Result<f64> {
    table
        .get(key)
        .copied()
        .ok_or_else(|| Error::MissingArtifacts(vec![key.to_string()]))
}

/// Runs the pipeline once per synthetic subset size and collects the
/// perplexities the benchmark checks. Stages shared between sizes are reused.
pub fn run_seed(root: &Path, seed: u64, scale: &BenchScale) -> Result<SeedResult> {
    let data = write_synthetic_data(&root.join("data"), &SynthDataConfig { seed, ..scale.data.clone() })?;
    let mut result = SeedResult {
        seed,
        scratch_test: 0.0,
        finetuned_test: 0.0,
        baseline_test: 0.0,
        interpolated_test: Vec::new(),
        reports: Vec::new(),
    };
    for &size in &scale.synthetic_sizes {
        let mut cfg = bench_config(&data, &root.join("work"), seed, scale);
        cfg.ngram.synthetic_max_sentences = Some(size);
        let report = Pipeline::new(cfg)?.run(None, false)?;
        result.scratch_test = metric(&report.neural_ppl, "scratch_test")?;
        result.finetuned_test = metric(&report.neural_ppl, "finetuned_test")?;
        result.baseline_test = metric(&report.ngram_ppl, "baseline_test")?;
        let used = report.corpus_sizes.get("synthetic_used").copied().unwrap_or(0);
        result
            .interpolated_test
            .push((used, metric(&report.ngram_ppl, "interpolated_test")?));
        result.reports.push(report);
    }
    Ok(result)
}

pub fn summary(results: &[SeedResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "seed {}: scratch {:.3} finetuned {:.3} baseline {:.3} interpolated {} gain {:.2}%",
            r.seed,
            r.scratch_test,
            r.finetuned_test,
            r.baseline_test,
            r.interpolated_test
                .iter()
                .map(|(n, p)| format!("{n}:{p:.3}"))
                .collect::<Vec<_>>()
                .join(" "),
            100.0 * r.interpolation_gain()
        );
    }
    s
}
