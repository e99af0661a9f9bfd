//! Error rates, agreement with the FP model, and layerwise drift.
//!
//! The desk-scale task is per-frame token classification. Frame argmaxes are
//! collapsed CTC-style (repeats merged, token 0 is blank, token 1 is a word
//! boundary) into a transcript. The FP model's transcript is the reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decimal;
use crate::calib::objective_cosine;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{run_quantized_trace, QuantizedModel};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;
pub const SPACE: usize = 1;
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Usage("error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Word error rate over whitespace-separated words.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    rate(&r, &h)
}

/// Character error rate, on the text with runs of whitespace folded to one space.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = normalize(reference).chars().collect();
    let h: Vec<char> = normalize(hypothesis).chars().collect();
    rate(&r, &h)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Printable symbol for a non-blank token.
pub fn token_symbol(token: usize) -> char {
    match token {
        SPACE => ' ',
        t => ALPHABET
            .chars()
            .nth(t - 2)
            .unwrap_or_else(|| char::from_u32(0x100 + t as u32).unwrap_or('?')),
    }
}

/// Greedy CTC collapse of per-frame token ids into a normalized transcript.
pub fn decode_frames(frames: &[usize]) -> String {
    let mut s = String::new();
    let mut last = None;
    for &t in frames {
        if Some(t) != last && t != BLANK {
            s.push(token_symbol(t));
        }
        last = Some(t);
    }
    normalize(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(with = "decimal")]
    pub wer: f64,
    #[serde(with = "decimal")]
    pub cer: f64,
    /// Utterance-level agreement of the top class of the time-averaged logits.
    #[serde(with = "decimal")]
    pub top1: f64,
    /// Frame-level argmax agreement.
    #[serde(with = "decimal")]
    pub fidelity: f64,
    #[serde(with = "decimal")]
    pub cosine_distance: f64,
}

struct SampleEval {
    word_edits: usize,
    words: usize,
    char_edits: usize,
    chars: usize,
    top1: bool,
    agree: usize,
    frames: usize,
    cosine: f64,
}

fn utterance_class(logits: &Tensor) -> usize {
    let cols = logits.shape()[1];
    let mut mean = vec![0.0; cols];
    for row in logits.data().chunks(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let mut best = 0;
    for (j, &v) in mean.iter().enumerate() {
        if v > mean[best] {
            best = j;
        }
    }
    best
}

fn eval_sample(model: &ModelGraph, qm: &QuantizedModel, x: &Tensor) -> Result<SampleEval> {
    let fp = model.trace(x)?;
    let q = run_quantized_trace(qm, x)?;
    let (fl, ql) = (fp.logits(), q.logits());
    if fl.ndim() != 2 || fl.shape() != ql.shape() {
        return Err(Error::dim("evaluate", fl.shape(), ql.shape()));
    }
    let fa = fl.argmax_rows()?;
    let qa = ql.argmax_rows()?;
    let agree = fa.iter().zip(&qa).filter(|(a, b)| a == b).count();
    let (rt, ht) = (decode_frames(&fa), decode_frames(&qa));
    let rw: Vec<&str> = rt.split_whitespace().collect();
    let hw: Vec<&str> = ht.split_whitespace().collect();
    let rc: Vec<char> = rt.chars().collect();
    let hc: Vec<char> = ht.chars().collect();
    let mut cosine = 0.0;
    for l in 0..model.num_layers() {
        cosine += objective_cosine(q.layer_output(l), fp.layer_output(l))?;
    }
    Ok(SampleEval {
        word_edits: edit_distance(&rw, &hw),
        words: rw.len(),
        char_edits: edit_distance(&rc, &hc),
        chars: rc.len(),
        top1: utterance_class(fl) == utterance_class(ql),
        agree,
        frames: fa.len(),
        cosine: cosine / model.num_layers() as f64,
    })
}

/// Compares `qm` against its FP reference on `inputs`.
///
/// WER and CER are corpus-level: total edits over total reference length.
/// Utterances whose reference transcript is empty add hypothesis insertions
/// to the numerator only.
pub fn evaluate(model: &ModelGraph, qm: &QuantizedModel, inputs: &[Tensor]) -> Result<EvalResult> {
    if inputs.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    if model.num_layers() != qm.num_layers() {
        return Err(Error::Usage(format!(
            "quantized model has {} layers, reference has {}",
            qm.num_layers(),
            model.num_layers()
        )));
    }
    let per = inputs
        .par_iter()
        .map(|x| eval_sample(model, qm, x))
        .collect::<Result<Vec<_>>>()?;
    let sum = |f: fn(&SampleEval) -> usize| per.iter().map(f).sum::<usize>();
    let (words, chars) = (sum(|s| s.words), sum(|s| s.chars));
    if words == 0 || chars == 0 {
        return Err(Error::Usage("reference transcripts are all empty".into()));
    }
    let n = per.len() as f64;
    Ok(EvalResult {
        wer: sum(|s| s.word_edits) as f64 / words as f64,
        cer: sum(|s| s.char_edits) as f64 / chars as f64,
        top1: per.iter().filter(|s| s.top1).count() as f64 / n,
        fidelity: sum(|s| s.agree) as f64 / sum(|s| s.frames) as f64,
        cosine_distance: per.iter().map(|s| s.cosine).sum::<f64>() / n,
    })
}

/// Frame-level argmax agreement only.
pub fn fidelity(model: &ModelGraph, qm: &QuantizedModel, inputs: &[Tensor]) -> Result<f64> {
    Ok(evaluate(model, qm, inputs)?.fidelity)
}
