use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::mask_to_f32;
use crate::model::{tokenizer, Transformer};
use crate::tensor::kernels::log_sum_exp;

use super::corpus::Document;

/// One multiple-choice item: pick the continuation of `prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McTask {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

impl McTask {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.is_empty() {
            return Err("task has no choices".into());
        }
        if self.choices.iter().any(String::is_empty) {
            return Err("empty choice".into());
        }
        if self.answer >= self.choices.len() {
            return Err(format!(
                "answer {} out of range for {} choices",
                self.answer,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

/// Parses JSON-lines tasks; blank lines are skipped.
pub fn parse_tasks(text: &str, path: &Path) -> Result<Vec<McTask>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let task: McTask = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        task.validate().map_err(perr)?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<McTask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tasks(&text, path)
}

pub fn write_tasks(tasks: &[McTask], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean log-probability of the choice tokens after the prompt.
pub fn choice_score(
    model: &Transformer,
    mask: &[f32],
    prompt: &[u8],
    choice: &[u8],
) -> Result<f64> {
    let mut tokens = tokenizer::encode(prompt);
    let choice_tokens: Vec<u32> = choice.iter().map(|&b| b as u32).collect();
    let max = model.config().max_seq_len;
    if choice_tokens.len() + 1 > max {
        return Err(Error::Length {
            len: choice_tokens.len() + 1,
            max,
        });
    }
    // keep the most recent context when the pair does not fit
    let keep = max - choice_tokens.len();
    if tokens.len() > keep {
        tokens.drain(..tokens.len() - keep);
    }
    let start = tokens.len();
    tokens.extend_from_slice(&choice_tokens);
    let mut cache = model.new_cache();
    let logits = model.forward_infer(&tokens[..tokens.len() - 1], mask, &mut cache)?;
    let mut total = 0.0f64;
    for (pos, &t) in tokens.iter().enumerate().skip(start) {
        let row = logits.row(pos - 1);
        total += (row[t as usize] - log_sum_exp(row)) as f64;
    }
    Ok(total / choice_tokens.len() as f64)
}

/// Index of the best-scoring choice; ties go to the lowest index.
pub fn predict(model: &Transformer, mask: &[f32], task: &McTask) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in task.choices.iter().enumerate() {
        let s = choice_score(model, mask, task.prompt.as_bytes(), c.as_bytes())?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Accuracy with a per-task mask choice.
pub fn multiple_choice_accuracy<F>(
    model: &Transformer,
    tasks: &[McTask],
    mut mask_for: F,
) -> Result<f64>
where
    F: FnMut(&McTask) -> Result<Vec<u8>>,
{
    if tasks.is_empty() {
        return Err(Error::Config("no multiple-choice tasks".into()));
    }
    let mut correct = 0;
    for t in tasks {
        let mask = mask_to_f32(&mask_for(t)?);
        correct += (predict(model, &mask, t)? == t.answer) as usize;
    }
    Ok(correct as f64 / tasks.len() as f64)
}

pub fn toy_multiple_choice_eval(model: &Transformer, mask: &[u8], tasks: &[McTask]) -> Result<f64> {
    multiple_choice_accuracy(model, tasks, |_| Ok(mask.to_vec()))
}

/// Continuation tasks cut from documents: the true next span against spans
/// taken from documents of other sources.
pub fn synthetic_tasks(
    docs: &[Document],
    count: usize,
    prompt_len: usize,
    choice_len: usize,
    num_choices: usize,
    seed: u64,
) -> Vec<McTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usable: Vec<&Document> = docs
        .iter()
        .filter(|d| d.text.len() >= prompt_len + choice_len)
        .collect();
    if usable.len() < 2 || num_choices == 0 {
        return Vec::new();
    }
    let span = |d: &Document, start: usize, len: usize| {
        String::from_utf8_lossy(&d.text.as_bytes()[start..start + len]).into_owned()
    };
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let doc = usable[i % usable.len()];
        let cut = rng.gen_range(prompt_len..=doc.text.len() - choice_len);
        let truth = span(doc, cut, choice_len);
        let mut choices = vec![truth.clone()];
        let mut others: Vec<&&Document> =
            usable.iter().filter(|o| o.domain != doc.domain).collect();
        if others.is_empty() {
            others = usable.iter().filter(|o| o.id != doc.id).collect();
        }
        let mut guard = 0;
        while choices.len() < num_choices && guard < 100 {
            guard += 1;
            let o = others.choose(&mut rng).unwrap();
            let s = rng.gen_range(0..=o.text.len() - choice_len);
            let c = span(o, s, choice_len);
            if !choices.contains(&c) {
                choices.push(c);
            }
        }
        choices.shuffle(&mut rng);
        let answer = choices.iter().position(|c| *c == truth).unwrap();
        tasks.push(McTask {
            prompt: span(doc, cut - prompt_len, prompt_len),
            choices,
            answer,
        });
    }
    tasks
}
