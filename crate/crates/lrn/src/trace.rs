//! Per-token decay traces of a trained model, as CSV.

use std::fmt::Write as _;

use lrn_core::decomposition::memory_trace;
use lrn_core::tasks::{toysent_tokenize, TaskId, TaskInput, TOYSENT_VOCAB};
use lrn_core::training::{InputSpec, Model};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "source_pos,token,eval_pos,weight_mean";

/// One `(source, evaluation position)` pair; positions are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub source_pos: usize,
    pub token: String,
    pub eval_pos: usize,
    pub weight_mean: f64,
}

/// Turns text into token ids the model understands: words for the
/// toy-sentiment vocabulary, raw bytes for a byte-level model.
pub fn encode(model: &Model, task: Option<TaskId>, text: &str) -> Result<(Vec<usize>, Vec<String>)> {
    match model.config().input {
        InputSpec::Tokens { vocab, .. } if task == Some(TaskId::ToySent) || (task.is_none() && vocab == TOYSENT_VOCAB.len()) => {
            let ids = toysent_tokenize(text)?;
            let names = ids.iter().map(|&i| TOYSENT_VOCAB[i].to_string()).collect();
            Ok((ids, names))
        }
        InputSpec::Tokens { vocab: 256, .. } => {
            let ids: Vec<usize> = text.bytes().map(usize::from).collect();
            Ok((ids.clone(), ids.iter().map(|b| b.to_string()).collect()))
        }
        _ => Err(Error::Unsupported("tracing needs a token-input model".to_string())),
    }
}

/// Decay curves of every token through the top layer.
pub fn trace(model: &Model, ids: &[usize], names: &[String]) -> Result<Vec<TraceRow>> {
    let traj = model.top_trajectory(&TaskInput::Tokens(ids.to_vec()))?;
    let mut rows = Vec::new();
    for k in 1..=ids.len() {
        let curve = memory_trace(&traj, k)?;
        for (j, &w) in curve.values.iter().enumerate() {
            rows.push(TraceRow {
                source_pos: k,
                token: names[k - 1].clone(),
                eval_pos: k + j,
                weight_mean: w,
            });
        }
    }
    Ok(rows)
}

/// Nine significant digits.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.source_pos, r.token, r.eval_pos, sig9(r.weight_mean));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrn_core::training::TrainConfig;
    use lrn_core::{CellKind, Rng};

    #[test]
    fn rows_cover_every_pair() {
        let c = TrainConfig::new(TaskId::ToySent, CellKind::Lrn);
        let model = Model::new(c.model_config(), &mut Rng::new(2)).unwrap();
        let (ids, names) = encode(&model, Some(TaskId::ToySent), "this movie is great").unwrap();
        let rows = trace(&model, &ids, &names).unwrap();
        assert_eq!(rows.len(), 4 + 3 + 2 + 1);
        assert_eq!(rows[0].token, "this");
        assert_eq!((rows[9].source_pos, rows[9].eval_pos), (4, 4));
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..3], ["1", "this", "1"]);
        assert_eq!(first[3].split('e').next().unwrap().replace(['.', '-'], "").len(), 9);
    }

    #[test]
    fn elman_models_cannot_be_traced() {
        let c = TrainConfig::new(TaskId::ToySent, CellKind::Elman);
        let model = Model::new(c.model_config(), &mut Rng::new(2)).unwrap();
        let (ids, names) = encode(&model, Some(TaskId::ToySent), "great").unwrap();
        assert!(trace(&model, &ids, &names).is_err());
    }
}
