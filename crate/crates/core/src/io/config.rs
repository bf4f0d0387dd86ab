//! `key = value` run configuration.
//!
//! One file carries the macro config (`macro.*`), the search settings
//! (`search.*`) and the discrete-training schedule (`train.*`). Keys may
//! appear in any order, each at most once; `#` starts a comment. The optional
//! `macro.preset` (`desk`, `tiny` or `mobile`) must be the first key and
//! supplies defaults for the remaining macro fields.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{parse_error, read_text, write_atomic};
use crate::search::{Decay, SearchConfig, TrainSchedule};
use crate::supernet::{BlockSpec, MacroConfig};
use crate::tensor::GateMode;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub macro_cfg: MacroConfig,
    pub search: SearchConfig,
    pub train: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            macro_cfg: MacroConfig::desk(),
            search: SearchConfig::default(),
            train: TrainSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.macro_cfg.validate()?;
        self.search.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.macro_cfg;
        let s = &self.search;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("macro.input_channels", m.input_channels.to_string());
        kv("macro.input_resolution", m.input_resolution.to_string());
        kv("macro.stem_channels", m.stem_channels.to_string());
        kv("macro.blocks", blocks_to_string(&m.blocks));
        kv("macro.head_channels", m.head_channels.to_string());
        kv("macro.num_classes", m.num_classes.to_string());
        kv("macro.width_multiplier", m.width_multiplier.to_string());
        kv("search.lambda", s.lambda.to_string());
        kv("search.epochs", s.epochs.to_string());
        kv("search.batch_size", s.batch_size.to_string());
        kv("search.lr", s.lr.initial.to_string());
        kv("search.lr_decay", decay_name(s.lr.decay).into());
        kv("search.lr_min", s.lr.min.to_string());
        kv("search.momentum", s.momentum.to_string());
        kv("search.weight_decay", s.weight_decay.to_string());
        kv("search.dropout_p_start", s.dropout.p_start.to_string());
        kv("search.dropout_p_end", s.dropout.p_end.to_string());
        kv("search.dropout_active_fraction", s.dropout.active_epoch_fraction.to_string());
        kv("search.seed", s.seed.to_string());
        kv("search.temperature", s.indicator.temperature.to_string());
        kv("search.gate_mode", gate_mode_name(s.indicator.mode).into());
        kv("search.runtime_floor_ms", s.runtime_floor_ms.to_string());
        kv("search.grad_clip", s.grad_clip.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.initial.to_string());
        kv("train.lr_decay", decay_name(t.lr.decay).into());
        kv("train.lr_min", t.lr.min.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.augment", t.augment.to_string());
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_error(path, line, format!("expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "macro.preset" && !seen.is_empty() {
                return Err(parse_error(path, line, "macro.preset must be the first key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(parse_error(path, line, format!("duplicate key '{key}'")));
            }
            cfg.set(key, value).map_err(|reason| parse_error(path, line, reason))?;
        }
        cfg.validate().map_err(|e| parse_error(path, 0, e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.macro_cfg;
        let s = &mut self.search;
        let t = &mut self.train;
        match key {
            "macro.preset" => {
                *m = match v {
                    "desk" => MacroConfig::desk(),
                    "tiny" => MacroConfig::tiny(),
                    "mobile" => MacroConfig::mobile(),
                    _ => return Err(format!("unknown preset '{v}' (desk, tiny, mobile)")),
                }
            }
            "macro.input_channels" => m.input_channels = num(key, v)?,
            "macro.input_resolution" => m.input_resolution = num(key, v)?,
            "macro.stem_channels" => m.stem_channels = num(key, v)?,
            "macro.blocks" => m.blocks = parse_blocks(v)?,
            "macro.head_channels" => m.head_channels = num(key, v)?,
            "macro.num_classes" => m.num_classes = num(key, v)?,
            "macro.width_multiplier" => m.width_multiplier = num(key, v)?,
            "search.lambda" => s.lambda = num(key, v)?,
            "search.epochs" => s.epochs = num(key, v)?,
            "search.batch_size" => s.batch_size = num(key, v)?,
            "search.lr" => s.lr.initial = num(key, v)?,
            "search.lr_decay" => s.lr.decay = parse_decay(v)?,
            "search.lr_min" => s.lr.min = num(key, v)?,
            "search.momentum" => s.momentum = num(key, v)?,
            "search.weight_decay" => s.weight_decay = num(key, v)?,
            "search.dropout_p_start" => s.dropout.p_start = num(key, v)?,
            "search.dropout_p_end" => s.dropout.p_end = num(key, v)?,
            "search.dropout_active_fraction" => s.dropout.active_epoch_fraction = num(key, v)?,
            "search.seed" => s.seed = num(key, v)?,
            "search.temperature" => s.indicator.temperature = num(key, v)?,
            "search.gate_mode" => s.indicator.mode = parse_gate_mode(v)?,
            "search.runtime_floor_ms" => s.runtime_floor_ms = num(key, v)?,
            "search.grad_clip" => s.grad_clip = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr.initial = num(key, v)?,
            "train.lr_decay" => t.lr.decay = parse_decay(v)?,
            "train.lr_min" => t.lr.min = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.augment" => t.augment = num(key, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?, path)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn decay_name(d: Decay) -> &'static str {
    match d {
        Decay::Constant => "constant",
        Decay::Cosine => "cosine",
    }
}

fn parse_decay(v: &str) -> std::result::Result<Decay, String> {
    match v {
        "constant" => Ok(Decay::Constant),
        "cosine" => Ok(Decay::Cosine),
        _ => Err(format!("unknown lr decay '{v}' (constant, cosine)")),
    }
}

fn gate_mode_name(m: GateMode) -> &'static str {
    match m {
        GateMode::HardForwardSoftBackward => "hard",
        GateMode::FullyRelaxed => "relaxed",
    }
}

fn parse_gate_mode(v: &str) -> std::result::Result<GateMode, String> {
    match v {
        "hard" => Ok(GateMode::HardForwardSoftBackward),
        "relaxed" => Ok(GateMode::FullyRelaxed),
        _ => Err(format!("unknown gate mode '{v}' (hard, relaxed)")),
    }
}

/// `LxCsS` per block, comma separated: `2x16s2,2x24s2`.
pub fn blocks_to_string(blocks: &[BlockSpec]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}x{}s{}", b.num_layers, b.out_channels, b.first_stride))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_blocks(v: &str) -> std::result::Result<Vec<BlockSpec>, String> {
    v.split(',')
        .map(|b| {
            let b = b.trim();
            let bad = || format!("block '{b}' is not of the form <layers>x<channels>s<stride>");
            let (layers, rest) = b.split_once('x').ok_or_else(bad)?;
            let (ch, stride) = rest.split_once('s').ok_or_else(bad)?;
            Ok(BlockSpec {
                num_layers: layers.parse().map_err(|_| bad())?,
                out_channels: ch.parse().map_err(|_| bad())?,
                first_stride: stride.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::LrSchedule;

    fn p() -> &'static Path {
        Path::new("run.cfg")
    }

    #[test]
    fn round_trip_of_non_default_values() {
        let mut c = RunConfig {
            macro_cfg: MacroConfig::tiny(),
            ..RunConfig::default()
        };
        c.search.lambda = 0.37;
        c.search.seed = u64::MAX;
        c.search.indicator.mode = GateMode::FullyRelaxed;
        c.train.augment = true;
        c.train.lr = LrSchedule::constant(0.05);
        let text = c.to_text();
        let back = RunConfig::from_text(&text, p()).unwrap();
        assert_eq!(c, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn preset_then_overrides() {
        let text = "# tiny run\nmacro.preset = tiny\nmacro.num_classes = 3  # three\nsearch.epochs=2\n";
        let c = RunConfig::from_text(text, p()).unwrap();
        assert_eq!(c.macro_cfg.num_classes, 3);
        assert_eq!(c.macro_cfg.blocks, MacroConfig::tiny().blocks);
        assert_eq!(c.search.epochs, 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("search.epochs = 2\nsearch.bogus = 1\n", 2),
            ("search.epochs = 2\nsearch.epochs = 3\n", 2),
            ("\n\nsearch.lambda = abc\n", 3),
            ("search.lambda\n", 1),
            ("search.epochs = 2\nmacro.preset = desk\n", 2),
            ("macro.blocks = 2x16\n", 1),
            ("search.gate_mode = soft\n", 1),
        ];
        for (text, want) in cases {
            match RunConfig::from_text(text, p()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_validation_runs_after_parsing() {
        assert!(RunConfig::from_text("search.epochs = 0\n", p()).is_err());
        assert!(RunConfig::from_text("macro.num_classes = 0\n", p()).is_err());
    }

    #[test]
    fn blocks_syntax() {
        let b = parse_blocks("1x16s1, 4x24s2").unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(blocks_to_string(&b), "1x16s1,4x24s2");
        assert!(parse_blocks("x16s1").is_err());
    }
}
