//! JSON Lines metrics stream.

use std::io::Write;

use lrn_core::training::MetricRecord;
use serde::Serialize;

#[derive(Serialize)]
struct Line<'a> {
    step: usize,
    loss: f64,
    metric_name: &'a str,
    metric: f64,
    train_loss: f64,
}

pub fn to_json_line(r: &MetricRecord) -> String {
    serde_json::to_string(&Line {
        step: r.step,
        loss: r.loss,
        metric_name: r.metric_name,
        metric: r.metric,
        train_loss: r.train_loss,
    })
    .expect("plain struct serialises")
}

pub fn write_record(out: &mut impl Write, r: &MetricRecord) -> std::io::Result<()> {
    writeln!(out, "{}", to_json_line(r))
}
