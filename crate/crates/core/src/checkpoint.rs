//! Flat text checkpoints for hybrid networks.
//!
//! ```text
//! taskquant-checkpoint 1
//! head estimation
//! analog 1
//! layer 240 80 identity
//! weights <out·in values, row-major>
//! biases <out values>
//! digital 1
//! layer 80 80 identity
//! weights ...
//! biases ...
//! bank 80 hard
//! thresholds <values>
//! levels <values>
//! ```
//!
//! A soft bank stores `amplitudes`, `shifts`, `slopes` and `trainable`
//! instead of `thresholds`/`levels`; a passing-gradient bank stores the
//! uniform quantizer like a hard one. Values use the shortest decimal form
//! that round-trips.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::hybrid::{Head, HybridNetwork};
use crate::net::{Activation, DenseLayer};
use crate::quantizer::{BankStage, HardQuantizer, QuantizerBank, SoftQuantizerParams};

pub const FORMAT_HEADER: &str = "taskquant-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn push_values(out: &mut String, key: &str, values: impl IntoIterator<Item = f64>) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

fn push_stack(out: &mut String, name: &str, layers: &[DenseLayer]) {
    let _ = writeln!(out, "{name} {}", layers.len());
    for layer in layers {
        let _ = writeln!(out, "layer {} {} {}", layer.in_dim(), layer.out_dim(), layer.activation().name());
        push_values(out, "weights", layer.weights().iter().copied());
        push_values(out, "biases", layer.biases().iter().copied());
    }
}

pub fn to_text(net: &HybridNetwork) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER} {FORMAT_VERSION}");
    let _ = writeln!(out, "head {}", net.head().name());
    push_stack(&mut out, "analog", net.analog());
    push_stack(&mut out, "digital", net.digital());
    let bank = net.bank();
    let _ = writeln!(out, "bank {} {}", bank.lanes(), bank.stage().name());
    match bank.stage() {
        BankStage::Soft(p) => {
            push_values(&mut out, "amplitudes", p.amplitudes().iter().copied());
            push_values(&mut out, "shifts", p.shifts().iter().copied());
            push_values(&mut out, "slopes", p.slopes().iter().copied());
            let _ = writeln!(out, "trainable {}", p.is_trainable());
        }
        BankStage::PassingGradient(q) | BankStage::Hard(q) => {
            push_values(&mut out, "thresholds", q.thresholds().iter().copied());
            push_values(&mut out, "levels", q.levels().iter().copied());
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            line: self.line,
            message: message.into(),
        }
    }

    /// Next non-blank line split into its keyword and the remaining fields.
    fn next(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        loop {
            let Some((k, raw)) = self.inner.next() else {
                self.line += 1;
                return Err(self.err(format!("unexpected end of file, expected '{keyword}'")));
            };
            self.line = k + 1;
            let mut fields = raw.split_whitespace();
            match fields.next() {
                None => continue,
                Some(word) if word == keyword => return Ok(fields.collect()),
                Some(word) => return Err(self.err(format!("expected '{keyword}', found '{word}'"))),
            }
        }
    }

    fn usizes(&mut self, keyword: &str, count: usize) -> Result<Vec<usize>> {
        let fields = self.next(keyword)?;
        if fields.len() != count {
            return Err(self.err(format!("'{keyword}' takes {count} fields")));
        }
        fields
            .iter()
            .map(|f| f.parse().map_err(|_| self.err(format!("bad integer '{f}'"))))
            .collect()
    }

    fn floats(&mut self, keyword: &str, count: Option<usize>) -> Result<Vec<f64>> {
        let fields = self.next(keyword)?;
        if let Some(n) = count {
            if fields.len() != n {
                return Err(self.err(format!("'{keyword}' expects {n} values, found {}", fields.len())));
            }
        }
        fields
            .iter()
            .map(|f| f.parse().map_err(|_| self.err(format!("bad number '{f}'"))))
            .collect()
    }

    fn stack(&mut self, name: &str) -> Result<Vec<DenseLayer>> {
        let count = self.usizes(name, 1)?[0];
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let fields = self.next("layer")?;
            if fields.len() != 3 {
                return Err(self.err("'layer' takes in, out and activation"));
            }
            let dims: Vec<usize> = fields[..2]
                .iter()
                .map(|f| f.parse().map_err(|_| self.err(format!("bad integer '{f}'"))))
                .collect::<Result<_>>()?;
            let activation = Activation::parse(fields[2]).map_err(|e| self.err(e.to_string()))?;
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let weights = self.floats("weights", Some(fan_in * fan_out))?;
            let biases = self.floats("biases", Some(fan_out))?;
            let weights = Array2::from_shape_vec((fan_out, fan_in), weights).map_err(|e| self.err(e.to_string()))?;
            layers.push(DenseLayer::new(weights, Array1::from(biases), activation).map_err(|e| self.err(e.to_string()))?);
        }
        Ok(layers)
    }
}

pub fn from_text(text: &str) -> Result<HybridNetwork> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let version = lines.usizes(FORMAT_HEADER, 1)?[0];
    if version != FORMAT_VERSION as usize {
        return Err(lines.err(format!("unsupported version {version}")));
    }
    let head = match lines.next("head")?.as_slice() {
        ["estimation"] => Head::Estimation,
        ["classification"] => Head::Classification,
        other => return Err(lines.err(format!("unknown head {other:?}"))),
    };
    let analog = lines.stack("analog")?;
    let digital = lines.stack("digital")?;
    let fields = lines.next("bank")?;
    let [lanes, kind] = fields.as_slice() else {
        return Err(lines.err("'bank' takes lanes and stage"));
    };
    let lanes: usize = lanes.parse().map_err(|_| lines.err("bad lane count"))?;
    let stage = match *kind {
        "soft" => {
            let a = lines.floats("amplitudes", None)?;
            let b = lines.floats("shifts", Some(a.len()))?;
            let c = lines.floats("slopes", Some(a.len()))?;
            let trainable = match lines.next("trainable")?.as_slice() {
                ["true"] => true,
                ["false"] => false,
                _ => return Err(lines.err("'trainable' must be true or false")),
            };
            let mut p = SoftQuantizerParams::new(a, b, c).map_err(|e| lines.err(e.to_string()))?;
            p.set_trainable(trainable);
            BankStage::Soft(p)
        }
        "passing" | "hard" => {
            let t = lines.floats("thresholds", None)?;
            let l = lines.floats("levels", Some(t.len() + 1))?;
            let q = HardQuantizer::new(t, l).map_err(|e| lines.err(e.to_string()))?;
            if *kind == "hard" {
                BankStage::Hard(q)
            } else {
                BankStage::PassingGradient(q)
            }
        }
        other => return Err(lines.err(format!("unknown bank stage '{other}'"))),
    };
    let bank = QuantizerBank::new(lanes, stage).map_err(|e| lines.err(e.to_string()))?;
    HybridNetwork::new(analog, bank, digital, head).map_err(|e| lines.err(e.to_string()))
}

pub fn save(net: &HybridNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HybridNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
