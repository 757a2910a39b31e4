//! Multiple-choice benchmark construction, answer parsing, scoring and
//! reporting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{AudioRef, AudioStore, InterleavedSample, Segment};
use crate::model::AudioLm;
use crate::params::ParamSet;
use crate::synth::{mix, TaskCatalog, TaskFamily};

pub const INSTRUCTION: &str = "Choose the correct option for the question based on the audio.";
pub const DEFAULT_CHOICES: usize = 4;
pub const MAX_NEW_TOKENS: usize = 16;

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// Instruction, question and lettered choices, one per line.
pub fn mcq_prompt(question: &str, choices: &[String]) -> String {
    let mut out = format!("{INSTRUCTION}\n{question}");
    for (i, c) in choices.iter().enumerate() {
        write!(out, "\n{}. {c}", letter(i)).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQItem {
    pub id: String,
    pub audio_ref: AudioRef,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub dataset_name: String,
    pub category: String,
}

impl MCQItem {
    pub fn prompt(&self) -> String {
        mcq_prompt(&self.question, &self.choices)
    }

    pub fn answer_letter(&self) -> char {
        letter(self.answer_index)
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<&String> = self.choices.iter().collect();
        if distinct.len() != self.choices.len() || self.choices.len() < 2 || self.choices.len() > 26 {
            return Err(Error::InvalidInput(format!("item {} has invalid choices", self.id)));
        }
        if self.answer_index >= self.choices.len() {
            return Err(Error::InvalidInput(format!("item {} answer index out of range", self.id)));
        }
        Ok(())
    }
}

/// Grouping used for report rollups.
pub fn category_for(dataset: &str) -> &'static str {
    match dataset {
        "pitch_id" | "chord_id" => "pitch_harmony",
        "instrument_id" => "timbre",
        "tempo_id" => "rhythm",
        "structure_count" => "structure",
        _ => "other",
    }
}

fn content_id(dataset: &str, audio: &AudioRef, question: &str, choices: &[String], answer: usize) -> String {
    let key = serde_json::to_vec(&(dataset, audio, question, choices, answer)).expect("serializable");
    format!("{dataset}-{}", &hex::encode(Sha256::digest(key))[..16])
}

fn name_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One item per pair: the pair's label plus `n_choices - 1` distinct labels
/// of other pairs, shuffled by `seed`.
pub fn build_mcq(
    pairs: &[(AudioRef, String)],
    n_choices: usize,
    seed: u64,
    dataset_name: &str,
    question: &str,
) -> Result<Vec<MCQItem>> {
    let labels: BTreeSet<&String> = pairs.iter().map(|(_, l)| l).collect();
    if n_choices < 2 || labels.len() < n_choices {
        return Err(Error::InsufficientLabels { needed: n_choices.max(2), found: labels.len() });
    }
    let labels: Vec<&String> = labels.into_iter().collect();
    let stream = name_hash(dataset_name);
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, (audio, answer))| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stream, i as u64));
            let others: Vec<&String> = labels.iter().copied().filter(|l| *l != answer).collect();
            let mut choices: Vec<String> =
                others.choose_multiple(&mut rng, n_choices - 1).map(|s| (*s).clone()).collect();
            choices.push(answer.clone());
            choices.shuffle(&mut rng);
            let answer_index = choices.iter().position(|c| c == answer).expect("answer present");
            MCQItem {
                id: content_id(dataset_name, audio, question, &choices, answer_index),
                audio_ref: audio.clone(),
                question: question.to_string(),
                choices,
                answer_index,
                dataset_name: dataset_name.to_string(),
                category: category_for(dataset_name).to_string(),
            }
        })
        .collect())
}

pub fn dataset_name(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::StructureLong => "structure_count",
        other => other.name(),
    }
}

/// Benchmark over a synthetic family with a multiple-choice attribute. The
/// audio stream is independent of every training stream.
pub fn synth_benchmark(
    catalog: &TaskCatalog,
    family: TaskFamily,
    n: usize,
    seed: u64,
    max_seconds: f64,
    n_choices: usize,
) -> Result<Vec<MCQItem>> {
    let attr = family
        .mcq_attribute()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no multiple-choice attribute", family.name())))?;
    let sample_seed = mix(seed, family as u64, 0xbe7c_4a11);
    let samples = catalog.generate(family.name(), n, sample_seed, max_seconds)?;
    let pairs: Vec<(AudioRef, String)> = samples
        .into_iter()
        .map(|s| {
            let label = s.labels[attr].clone();
            (AudioRef::Spec { spec: s.audio_spec }, label)
        })
        .collect();
    build_mcq(&pairs, n_choices, seed, dataset_name(family), family.question())
}

/// Maps a free-form response onto a choice index.
///
/// Rules, in order: the first whitespace token that is a single choice letter
/// (optionally written `(B`, `B.`, `B)` or `B:`, any case); an exact
/// case-insensitive match of the whole response with a choice; the only
/// choice whose text occurs in the response. Anything else is `None`.
pub fn parse_answer(raw: &str, choices: &[String]) -> Option<usize> {
    let text = raw.trim();
    for token in text.split_whitespace() {
        let core = token.strip_prefix('(').unwrap_or(token);
        let core = core.strip_suffix(['.', ')', ':']).unwrap_or(core);
        let mut chars = core.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            let c = c.to_ascii_uppercase();
            if c.is_ascii_uppercase() {
                let idx = (c as u8 - b'A') as usize;
                if idx < choices.len() {
                    return Some(idx);
                }
            }
        }
    }
    let lower = text.to_lowercase();
    if let Some(i) = choices.iter().position(|c| c.trim().to_lowercase() == lower) {
        return Some(i);
    }
    let contained: Vec<usize> = choices
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.trim().is_empty() && lower.contains(&c.trim().to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    match contained[..] {
        [i] => Some(i),
        _ => None,
    }
}

/// Anything that can answer a prompt about some audio.
pub trait ModelAdapter: Sync {
    fn name(&self) -> &str;
    fn answer(&self, prompt: &str, audio: &[AudioRef]) -> Result<String>;
}

fn lookup_key(prompt: &str, audio: &[AudioRef]) -> String {
    let labels: Vec<String> = audio.iter().map(AudioRef::label).collect();
    format!("{}\u{1f}{prompt}", labels.join("\u{1e}"))
}

/// Answers every known item correctly; used to self-test the harness.
pub struct OracleAdapter {
    answers: HashMap<String, char>,
}

impl OracleAdapter {
    pub fn new(items: &[MCQItem]) -> Self {
        let answers = items
            .iter()
            .map(|it| (lookup_key(&it.prompt(), std::slice::from_ref(&it.audio_ref)), it.answer_letter()))
            .collect();
        Self { answers }
    }
}

impl ModelAdapter for OracleAdapter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn answer(&self, prompt: &str, audio: &[AudioRef]) -> Result<String> {
        self.answers
            .get(&lookup_key(prompt, audio))
            .map(|c| c.to_string())
            .ok_or_else(|| Error::InvalidInput("oracle has no answer for this item".into()))
    }
}

/// Picks a lettered option uniformly, as a deterministic function of the
/// seed and the item.
pub struct RandomAdapter {
    pub seed: u64,
}

impl ModelAdapter for RandomAdapter {
    fn name(&self) -> &str {
        "random"
    }

    fn answer(&self, prompt: &str, audio: &[AudioRef]) -> Result<String> {
        let n = prompt
            .lines()
            .filter(|l| {
                let b = l.as_bytes();
                b.len() >= 2 && b[0].is_ascii_uppercase() && b[1] == b'.'
            })
            .count()
            .max(1);
        let h = mix(self.seed, name_hash(&lookup_key(prompt, audio)), 0);
        Ok(letter((h % n as u64) as usize).to_string())
    }
}

/// Our model, decoding greedily.
pub struct LmAdapter<'a> {
    pub model: &'a AudioLm,
    pub params: &'a ParamSet,
    pub store: AudioStore,
    pub max_new_tokens: usize,
    pub label: String,
}

impl<'a> LmAdapter<'a> {
    pub fn new(model: &'a AudioLm, params: &'a ParamSet, store: AudioStore) -> Self {
        Self { model, params, store, max_new_tokens: MAX_NEW_TOKENS, label: "audiolm".into() }
    }
}

impl ModelAdapter for LmAdapter<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn answer(&self, prompt: &str, audio: &[AudioRef]) -> Result<String> {
        let mut segments: Vec<Segment> = audio.iter().cloned().map(Segment::Audio).collect();
        segments.push(Segment::Text(prompt.to_string()));
        let sample = InterleavedSample::new(segments, "", self.model.cfg.frontend.max_seconds);
        self.model.generate(self.params, &sample, &self.store, self.max_new_tokens, 0.0, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub dataset: String,
    pub raw: String,
    pub parsed: Option<usize>,
    pub correct: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub category: String,
    pub total: usize,
    pub correct: usize,
    /// Parsed to a wrong choice, or the adapter failed.
    pub incorrect: usize,
    pub unparsed: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub datasets: BTreeMap<String, DatasetScore>,
    /// Unweighted mean of dataset accuracies within each category.
    pub categories: BTreeMap<String, f64>,
    /// Unweighted mean over datasets.
    pub macro_average: f64,
    pub items: Vec<ItemRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn score_item(adapter: &dyn ModelAdapter, item: &MCQItem) -> ItemRecord {
    let (raw, error) = match adapter.answer(&item.prompt(), std::slice::from_ref(&item.audio_ref)) {
        Ok(r) => (r, None),
        Err(e) => (String::new(), Some(e.to_string())),
    };
    let parsed = if error.is_none() { parse_answer(&raw, &item.choices) } else { None };
    ItemRecord {
        id: item.id.clone(),
        dataset: item.dataset_name.clone(),
        correct: parsed == Some(item.answer_index),
        raw,
        parsed,
        error,
    }
}

/// Asks the adapter once per item and aggregates the results.
pub fn evaluate(adapter: &dyn ModelAdapter, items: &[MCQItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("no benchmark items".into()));
    }
    for it in items {
        it.validate()?;
    }
    let records: Vec<ItemRecord> = items.par_iter().map(|it| score_item(adapter, it)).collect();
    Ok(aggregate(adapter.name(), items, records))
}

pub fn aggregate(model: &str, items: &[MCQItem], records: Vec<ItemRecord>) -> EvalReport {
    let mut datasets: BTreeMap<String, DatasetScore> = BTreeMap::new();
    for (item, rec) in items.iter().zip(&records) {
        let d = datasets.entry(item.dataset_name.clone()).or_insert_with(|| DatasetScore {
            category: item.category.clone(),
            total: 0,
            correct: 0,
            incorrect: 0,
            unparsed: 0,
            accuracy: 0.0,
        });
        d.total += 1;
        if rec.correct {
            d.correct += 1;
        } else if rec.parsed.is_some() || rec.error.is_some() {
            d.incorrect += 1;
        } else {
            d.unparsed += 1;
        }
    }
    for d in datasets.values_mut() {
        d.accuracy = d.correct as f64 / d.total as f64;
    }
    let mut by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for d in datasets.values() {
        by_category.entry(d.category.clone()).or_default().push(d.accuracy);
    }
    let categories = by_category.into_iter().map(|(k, v)| (k, mean(v.into_iter()))).collect();
    let macro_average = mean(datasets.values().map(|d| d.accuracy));
    EvalReport { model: model.to_string(), datasets, categories, macro_average, items: records }
}

impl EvalReport {
    /// Aligned text table: category, dataset, items, accuracy, then the
    /// macro average.
    pub fn table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![["Category".into(), "Dataset".into(), "Items".into(), "Accuracy".into()]];
        let mut sorted: Vec<(&String, &DatasetScore)> = self.datasets.iter().collect();
        sorted.sort_by(|a, b| (&a.1.category, a.0).cmp(&(&b.1.category, b.0)));
        for (name, d) in sorted {
            rows.push([d.category.clone(), name.clone(), d.total.to_string(), format!("{:.3}", d.accuracy)]);
        }
        rows.push(["Average".into(), String::new(), String::new(), format!("{:.3}", self.macro_average)]);
        let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("model: {}\n", self.model);
        for r in rows {
            let line = format!(
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// SVG bar chart of dataset accuracies within one category.
    pub fn category_chart(&self, category: &str) -> String {
        let bars: Vec<(&String, f64)> =
            self.datasets.iter().filter(|(_, d)| d.category == category).map(|(n, d)| (n, d.accuracy)).collect();
        bar_chart(&format!("{} ({category})", self.model), &bars)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

/// Minimal SVG bar chart for scores in [0, 1].
pub fn bar_chart<S: AsRef<str>>(title: &str, bars: &[(S, f64)]) -> String {
    let (bar_w, gap, height, left, top) = (60.0, 20.0, 200.0, 40.0, 30.0);
    let width = left + bars.len() as f64 * (bar_w + gap) + gap;
    let total_h = top + height + 40.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{total_h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    writeln!(svg, "<text x=\"{left}\" y=\"18\" font-size=\"13\">{}</text>", xml_escape(title)).expect("write");
    writeln!(svg, "<line x1=\"{left}\" y1=\"{y}\" x2=\"{width}\" y2=\"{y}\" stroke=\"black\"/>", y = top + height)
        .expect("write");
    for (i, (label, value)) in bars.iter().enumerate() {
        let v = value.clamp(0.0, 1.0);
        let x = left + gap + i as f64 * (bar_w + gap);
        let h = v * height;
        let y = top + height - h;
        writeln!(svg, "<rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4878a8\"/>").expect("write");
        writeln!(svg, "<text x=\"{x}\" y=\"{}\">{value:.3}</text>", y - 4.0).expect("write");
        writeln!(svg, "<text x=\"{x}\" y=\"{}\">{}</text>", top + height + 15.0, xml_escape(label.as_ref()))
            .expect("write");
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_items(path: &Path, items: &[MCQItem]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_items(path: &Path) -> Result<Vec<MCQItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.txt` and one SVG chart per category into
/// `dir`. Returns the paths written.
pub fn write_report(dir: &Path, report: &EvalReport, charts: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let json = dir.join("report.json");
    write_file(&json, serde_json::to_string_pretty(report)?.as_bytes())?;
    written.push(json);
    let txt = dir.join("report.txt");
    write_file(&txt, report.table().as_bytes())?;
    written.push(txt);
    if charts {
        for cat in report.categories.keys() {
            let p = dir.join(format!("chart-{cat}.svg"));
            write_file(&p, report.category_chart(cat).as_bytes())?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
