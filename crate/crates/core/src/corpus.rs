//! Symptom records: sentence chunking, the synthetic generator with planted
//! organ mixtures, stratified splits and JSONL storage.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{gaussian, stage_rng};
use crate::tensor::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomRecord {
    pub id: String,
    pub organ_id: usize,
    pub text: String,
    pub embedding: Vec<f64>,
    pub planted_weights: Option<Vec<f64>>,
}

impl SymptomRecord {
    /// Organs whose planted weight reaches `threshold`; always contains the
    /// primary organ.
    pub fn label_set(&self, threshold: f64) -> Vec<usize> {
        match &self.planted_weights {
            Some(w) => (0..w.len())
                .filter(|&k| k == self.organ_id || w[k] >= threshold)
                .collect(),
            None => vec![self.organ_id],
        }
    }
}

/// A deliberately correlated organ pair: records of either organ carry a
/// planted weight in `[weight/2, weight)` for the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganOverlap {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_organs: usize,
    pub per_organ: usize,
    pub d_txt: usize,
    pub noise_sigma: f64,
    pub mixture_alpha: f64,
    pub seed: u64,
    pub overlaps: Vec<OrganOverlap>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_organs: 7,
            per_organ: 200,
            d_txt: 64,
            noise_sigma: 0.05,
            mixture_alpha: 0.4,
            seed: 0,
            overlaps: Vec::new(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_organs < 2 {
            return fail(format!("n_organs must be at least 2, got {}", self.n_organs));
        }
        if self.per_organ < 1 {
            return fail("per_organ must be at least 1".into());
        }
        if self.d_txt < 2 {
            return fail(format!("d_txt must be at least 2, got {}", self.d_txt));
        }
        if self.d_txt < self.n_organs {
            return fail(format!(
                "d_txt {} is smaller than n_organs {}: prototypes cannot be orthogonal",
                self.d_txt, self.n_organs
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mixture_alpha) {
            return fail("mixture_alpha must lie in [0, 1]".into());
        }
        for o in &self.overlaps {
            if o.a >= self.n_organs || o.b >= self.n_organs || o.a == o.b {
                return fail(format!("invalid overlap pair ({}, {})", o.a, o.b));
            }
            if !(0.0..1.0).contains(&o.weight) {
                return fail(format!("overlap weight {} must lie in [0, 1)", o.weight));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of input.
pub fn split_sentences(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                let s = raw[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = raw[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Groups sentences greedily into chunks of `max_sentences`; the final chunk
/// holds the remainder.
pub fn chunk_text(raw: &str, min_sentences: usize, max_sentences: usize) -> Vec<String> {
    debug_assert!(min_sentences >= 1 && min_sentences <= max_sentences);
    split_sentences(raw)
        .chunks(max_sentences.max(1))
        .map(|c| c.join(" "))
        .collect()
}

/// Orthonormal prototypes from Gram-Schmidt on seeded Gaussian draws.
pub fn organ_prototypes(cfg: &CorpusConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, "prototypes");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_organs);
    while protos.len() < cfg.n_organs {
        let mut v: Vec<f64> = (0..cfg.d_txt).map(|_| gaussian(&mut rng)).collect();
        for p in &protos {
            let d = ops::dot(&v, p);
            v.iter_mut().zip(p).for_each(|(x, y)| *x -= d * y);
        }
        if let Ok(u) = ops::normalized(&v) {
            protos.push(u);
        }
    }
    Ok(protos)
}

pub fn generate_synthetic_corpus(cfg: &CorpusConfig) -> Result<Vec<SymptomRecord>> {
    let protos = organ_prototypes(cfg)?;
    let mut rng = stage_rng(cfg.seed, "corpus");
    let n = cfg.n_organs;
    let mut records = Vec::with_capacity(n * cfg.per_organ);
    for organ in 0..n {
        for j in 0..cfg.per_organ {
            let mut w: Vec<f64> = (0..n)
                .map(|k| {
                    if k == organ {
                        1.0
                    } else {
                        rng.random::<f64>() * cfg.mixture_alpha
                    }
                })
                .collect();
            for o in &cfg.overlaps {
                let other = if o.a == organ {
                    o.b
                } else if o.b == organ {
                    o.a
                } else {
                    continue;
                };
                w[other] = o.weight * (0.5 + 0.5 * rng.random::<f64>());
            }
            let mut e = vec![0.0; cfg.d_txt];
            for (wk, p) in w.iter().zip(&protos) {
                e.iter_mut().zip(p).for_each(|(x, y)| *x += wk * y);
            }
            for x in e.iter_mut() {
                *x += cfg.noise_sigma * gaussian(&mut rng);
            }
            let embedding = ops::normalized(&e)?;
            let max = w.iter().copied().fold(f64::MIN, f64::max);
            w.iter_mut().for_each(|x| *x /= max);
            records.push(SymptomRecord {
                id: format!("o{organ}-{j:04}"),
                organ_id: organ,
                text: String::new(),
                embedding,
                planted_weights: Some(w),
            });
        }
    }
    Ok(records)
}

/// Stratified split: per organ, `floor(train_fraction * n)` seeded picks go to
/// train. Both halves keep input order.
pub fn split_corpus(records: &[SymptomRecord], spec: &SplitSpec) -> Result<(Vec<SymptomRecord>, Vec<SymptomRecord>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} must lie in (0, 1)",
            spec.train_fraction
        )));
    }
    let n_organs = records.iter().map(|r| r.organ_id + 1).max().unwrap_or(0);
    let mut by_organ: Vec<Vec<usize>> = vec![Vec::new(); n_organs];
    for (i, r) in records.iter().enumerate() {
        by_organ[r.organ_id].push(i);
    }
    let mut rng = stage_rng(spec.seed, "split");
    let mut in_train = vec![false; records.len()];
    for (organ, idx) in by_organ.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Contract(format!(
                "organ {organ} has {} record(s); a split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = (spec.train_fraction * idx.len() as f64).floor() as usize;
        for &i in &idx[..k] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone())
        } else {
            test.push(r.clone())
        }
    }
    Ok((train, test))
}

pub fn write_jsonl(path: &Path, records: &[SymptomRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SymptomRecord>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}
