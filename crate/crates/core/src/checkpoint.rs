//! `MTCS-CKPT v1` text checkpoints: training config, every named tensor and
//! the trained node bank.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::config::{split_line, train_to_text, RunConfig};
use crate::datagen::format_float;
use crate::error::{Error, Result};
use crate::graph::NodeBank;
use crate::model::{ExtractorConfig, ModelKind, ModelSpec, ParamStore};
use crate::training::TrainedModel;

pub const HEADER: &str = "MTCS-CKPT v1";

fn write_tensor(out: &mut String, name: &str, t: &Array2<f64>) {
    let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
    for row in t.rows() {
        let cells: Vec<String> = row.iter().map(|&x| format_float(x)).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
}

fn flags(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn write_checkpoint(model: &TrainedModel) -> String {
    let spec = &model.spec;
    let mut out = format!("{HEADER}\n[config]\n");
    out.push_str(&train_to_text(&model.config));
    out.push_str("[model]\n");
    let _ = writeln!(out, "kind = {}", spec.kind);
    let _ = writeln!(out, "input_dim = {}", spec.extractor.input_dim);
    let hidden: Vec<String> = spec.extractor.hidden.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(out, "hidden = {}", hidden.join(","));
    let _ = writeln!(out, "embed_dim = {}", spec.embed_dim());
    let _ = writeln!(out, "num_layers = {}", spec.num_layers);
    let _ = writeln!(out, "num_tasks = {}", spec.num_tasks);
    let _ = writeln!(out, "num_classes = {}", spec.num_classes);
    out.push_str("[tensors]\n");
    for (name, t) in model.params.tensors() {
        write_tensor(&mut out, name, t);
    }
    if let Some(bank) = &model.bank {
        out.push_str("[bank]\n");
        let _ = writeln!(out, "decay = {}", format_float(bank.decay));
        let _ = writeln!(out, "task_seen = {}", flags(&bank.task_seen));
        let _ = writeln!(out, "class_seen = {}", flags(&bank.class_seen));
        write_tensor(&mut out, "task_nodes", &bank.task_nodes);
        write_tensor(&mut out, "class_nodes", &bank.class_nodes);
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<&'a str> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some(l)
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.inner.peek().map(|(_, l)| *l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.last, msg)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        match self.next() {
            Some(l) if l.trim() == want => Ok(()),
            _ => Err(self.err(format!("expected `{want}`"))),
        }
    }

    /// `key = value` lines up to the next `[section]` or tensor.
    fn pairs(&mut self) -> Result<Vec<(&'a str, &'a str, usize)>> {
        let mut out = Vec::new();
        while let Some(l) = self.peek() {
            if l.starts_with('[') || l.starts_with("tensor ") {
                break;
            }
            self.next();
            match split_line(l) {
                None => {}
                Some(Ok((k, v))) => out.push((k, v, self.last)),
                Some(Err(())) => return Err(self.err("expected `key = value`")),
            }
        }
        Ok(out)
    }

    fn tensor(&mut self) -> Result<(String, Array2<f64>)> {
        let head = self.next().ok_or_else(|| self.err("unexpected end of file"))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [_, name, rows, cols] = parts[..] else {
            return Err(self.err("expected `tensor <name> <rows> <cols>`"));
        };
        if parts[0] != "tensor" {
            return Err(self.err("expected `tensor <name> <rows> <cols>`"));
        }
        let rows: usize = rows.parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| self.err("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next().ok_or_else(|| self.err("truncated tensor"))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| self.err(format!("bad number `{tok}`")))?);
            }
            if data.len() - before != cols {
                return Err(self.err(format!("expected {cols} values")));
            }
        }
        let t = Array2::from_shape_vec((rows, cols), data).expect("counted");
        Ok((name.to_owned(), t))
    }
}

fn parse_flags(s: &str) -> Option<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<TrainedModel> {
    let mut lines = Lines { inner: text.lines().enumerate().peekable(), path, last: 0 };
    lines.expect(HEADER)?;
    lines.expect("[config]")?;
    let mut run = RunConfig::default();
    for (k, v, line) in lines.pairs()? {
        run.set(k, v).map_err(|e| Error::parse(path, line, e.to_string()))?;
    }
    let config = run.train;
    config.validate()?;

    lines.expect("[model]")?;
    let mut kind = None;
    let mut hidden = None;
    let mut sizes = std::collections::HashMap::new();
    for (k, v, line) in lines.pairs()? {
        let bad = || Error::parse(path, line, format!("bad value for `{k}`"));
        match k {
            "kind" => kind = Some(v.parse::<ModelKind>()?),
            "hidden" => {
                let h: std::result::Result<Vec<usize>, _> =
                    v.split(',').filter(|s| !s.is_empty()).map(str::parse).collect();
                hidden = Some(h.map_err(|_| bad())?);
            }
            "input_dim" | "embed_dim" | "num_layers" | "num_tasks" | "num_classes" => {
                sizes.insert(k, v.parse::<usize>().map_err(|_| bad())?);
            }
            _ => return Err(Error::parse(path, line, format!("unknown key `{k}`"))),
        }
    }
    let get = |k: &str| sizes.get(k).copied().ok_or_else(|| Error::parse(path, 0, format!("missing `{k}`")));
    let spec = ModelSpec {
        kind: kind.ok_or_else(|| Error::parse(path, 0, "missing `kind`"))?,
        extractor: ExtractorConfig {
            input_dim: get("input_dim")?,
            hidden: hidden.ok_or_else(|| Error::parse(path, 0, "missing `hidden`"))?,
            output_dim: get("embed_dim")?,
        },
        num_layers: get("num_layers")?,
        num_tasks: get("num_tasks")?,
        num_classes: get("num_classes")?,
    };
    spec.validate()?;

    lines.expect("[tensors]")?;
    let expected = ParamStore::zeros(&spec);
    let mut tensors = Vec::new();
    for (name, t) in expected.tensors() {
        let (got_name, got) = lines.tensor()?;
        if &got_name != name || got.dim() != t.dim() {
            return Err(lines.err(format!("expected tensor `{name}` of shape {:?}", t.dim())));
        }
        tensors.push((got_name, got));
    }
    let params = ParamStore::from_tensors(tensors);

    let bank = if spec.kind == ModelKind::Graph {
        lines.expect("[bank]")?;
        let mut decay = None;
        let mut task_seen = None;
        let mut class_seen = None;
        for (k, v, line) in lines.pairs()? {
            let bad = || Error::parse(path, line, format!("bad value for `{k}`"));
            match k {
                "decay" => decay = Some(v.parse::<f64>().map_err(|_| bad())?),
                "task_seen" => task_seen = Some(parse_flags(v).ok_or_else(bad)?),
                "class_seen" => class_seen = Some(parse_flags(v).ok_or_else(bad)?),
                _ => return Err(Error::parse(path, line, format!("unknown key `{k}`"))),
            }
        }
        let (_, task_nodes) = lines.tensor()?;
        let (_, class_nodes) = lines.tensor()?;
        let d = spec.embed_dim();
        let bank = NodeBank {
            task_nodes,
            class_nodes,
            task_seen: task_seen.unwrap_or_default(),
            class_seen: class_seen.unwrap_or_default(),
            decay: decay.unwrap_or(config.decay),
        };
        if bank.task_nodes.dim() != (spec.num_tasks, d)
            || bank.class_nodes.dim() != (spec.num_classes, d)
            || bank.task_seen.len() != spec.num_tasks
            || bank.class_seen.len() != spec.num_classes
        {
            return Err(lines.err("node bank shape disagrees with the model"));
        }
        Some(bank)
    } else {
        None
    };
    while let Some(l) = lines.next() {
        if !l.trim().is_empty() {
            return Err(lines.err("trailing content"));
        }
    }
    Ok(TrainedModel { spec, config, params, bank })
}
