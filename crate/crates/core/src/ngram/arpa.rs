//! ARPA text format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::model::{Entry, NGramModel};
use super::vocab::{Vocab, BOS, EOS, UNK};
use crate::error::{Error, Result};

fn fmt_log(x: f64) -> String {
    let s = format!("{x:.7}");
    if s == "-0.0000000" {
        "0.0000000".to_string()
    } else {
        s
    }
}

/// Unigrams in id order, higher orders sorted by id tuple. Backoff weights
/// are written for every order below the top unless they print as zero.
pub fn arpa_string(model: &NGramModel) -> String {
    let mut out = String::from("\\data\\\n");
    for (k, level) in model.levels.iter().enumerate() {
        let _ = writeln!(out, "ngram {}={}", k + 1, level.len());
    }
    for (k, level) in model.levels.iter().enumerate() {
        let _ = write!(out, "\n\\{}-grams:\n", k + 1);
        let mut grams: Vec<_> = level.iter().collect();
        grams.sort_by(|a, b| a.0.cmp(b.0));
        for (g, e) in grams {
            let words: Vec<&str> = g.iter().map(|&id| model.vocab.word(id)).collect();
            let _ = write!(out, "{}\t{}", fmt_log(e.log_prob), words.join(" "));
            let bo = fmt_log(e.backoff);
            if k + 1 < model.order && bo != "0.0000000" {
                let _ = write!(out, "\t{bo}");
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn write_arpa(model: &NGramModel, path: &Path) -> Result<()> {
    std::fs::write(path, arpa_string(model)).map_err(|e| Error::io(path, e))
}

pub fn read_arpa(path: &Path) -> Result<NGramModel> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(data).map_err(|_| Error::parse(path.display(), 0, "file is not UTF-8"))?;
    parse_arpa(&text, &path.display().to_string())
}

pub fn parse_arpa(text: &str, source: &str) -> Result<NGramModel> {
    let err = |line: usize, msg: String| Error::parse(source, line, msg);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let mut header_line = 0;
    for (n, l) in lines.by_ref() {
        if l.trim().is_empty() {
            continue;
        }
        if l.trim() != "\\data\\" {
            return Err(err(n, format!("expected \\data\\, got '{l}'")));
        }
        header_line = n;
        break;
    }
    if header_line == 0 {
        return Err(err(0, "missing \\data\\ header".into()));
    }

    let mut declared: Vec<usize> = Vec::new();
    let mut pending = None;
    for (n, l) in lines.by_ref() {
        let t = l.trim();
        if t.is_empty() {
            if !declared.is_empty() {
                break;
            }
            continue;
        }
        if t.starts_with('\\') {
            pending = Some((n, t.to_string()));
            break;
        }
        let spec = t
            .strip_prefix("ngram ")
            .ok_or_else(|| err(n, format!("expected 'ngram k=count', got '{t}'")))?;
        let (k, c) = spec
            .split_once('=')
            .ok_or_else(|| err(n, format!("expected 'ngram k=count', got '{t}'")))?;
        let k: usize = k.trim().parse().map_err(|_| err(n, format!("bad order '{k}'")))?;
        let c: usize = c.trim().parse().map_err(|_| err(n, format!("bad count '{c}'")))?;
        if k != declared.len() + 1 {
            return Err(err(n, format!("expected order {}, got {k}", declared.len() + 1)));
        }
        declared.push(c);
    }
    let order = declared.len();
    if order == 0 {
        return Err(err(header_line, "no ngram counts declared".into()));
    }

    let mut raw: Vec<Vec<(Vec<String>, Entry)>> = vec![Vec::new(); order];
    let mut section: Option<(usize, usize)> = None;
    let mut ended = false;
    let mut next = pending;
    loop {
        let (n, l) = match next.take() {
            Some((n, l)) => (n, l),
            None => match lines.next() {
                Some((n, l)) => (n, l.to_string()),
                None => break,
            },
        };
        let t = l.trim();
        if t.is_empty() {
            continue;
        }
        if ended {
            return Err(err(n, format!("content after \\end\\: '{t}'")));
        }
        if t == "\\end\\" {
            ended = true;
            continue;
        }
        if let Some(k) = t.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
            let k: usize = k.parse().map_err(|_| err(n, format!("bad section header '{t}'")))?;
            let expected = section.map_or(1, |(k, _)| k + 1);
            if k != expected || k > order {
                return Err(err(n, format!("unexpected section '{t}', expected \\{expected}-grams:")));
            }
            section = Some((k, n));
            continue;
        }
        if t.starts_with('\\') {
            return Err(err(n, format!("bad section header '{t}'")));
        }
        let (k, _) = section.ok_or_else(|| err(n, format!("entry outside a section: '{t}'")))?;
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() < k + 1 || parts.len() > k + 2 {
            return Err(err(n, format!("expected probability, {k} words and optional backoff in '{t}'")));
        }
        let words: Vec<String> = parts[1..=k].iter().map(|s| s.to_string()).collect();
        let log_prob: f64 = parts[0]
            .parse()
            .map_err(|_| err(n, format!("non-numeric probability '{}'", parts[0])))?;
        let backoff = match parts.get(k + 1) {
            Some(b) => b.parse().map_err(|_| err(n, format!("non-numeric backoff '{b}'")))?,
            None => 0.0,
        };
        raw[k - 1].push((words, Entry { log_prob, backoff }));
    }
    if !ended {
        return Err(err(0, "missing \\end\\".into()));
    }
    for (k, entries) in raw.iter().enumerate() {
        if entries.len() != declared[k] {
            return Err(err(
                header_line + k + 1,
                format!("header declares {} {}-grams, found {}", declared[k], k + 1, entries.len()),
            ));
        }
    }

    let specials = [BOS, EOS, UNK];
    let vocab = Vocab::from_words(
        raw[0]
            .iter()
            .map(|(w, _)| w[0].as_str())
            .filter(|w| !specials.contains(w)),
    );
    let mut levels = vec![HashMap::new(); order];
    for (k, entries) in raw.into_iter().enumerate() {
        for (words, e) in entries {
            let mut ids = Vec::with_capacity(words.len());
            for w in &words {
                ids.push(vocab.id(w).ok_or_else(|| err(0, format!("word '{w}' has no unigram entry")))?);
            }
            levels[k].insert(ids, e);
        }
    }
    for w in specials {
        let id = vocab.id(w).expect("reserved word");
        levels[0].entry(vec![id]).or_insert(Entry {
            log_prob: super::model::LOG_ZERO,
            backoff: 0.0,
        });
    }
    Ok(NGramModel { order, vocab, levels })
}
