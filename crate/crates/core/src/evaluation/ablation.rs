use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::ConfusionMatrix;
use super::stats::{paired_t_test, TTest};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::modality::ModalityMask;
use crate::model::{train, FusionKind, Model, RunConfig, RunReport};

/// Scores of a model on one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fingerprint: String,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub num_utterances: usize,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &Model, corpus: &Corpus) -> Result<Evaluation> {
    let pred: Vec<usize> = model.predict(corpus)?.into_iter().flatten().collect();
    let gold = corpus.labels();
    let confusion = ConfusionMatrix::new(&gold, &pred, model.shape.num_classes())?;
    Ok(Evaluation {
        fingerprint: model.config.fingerprint(),
        weighted_f1: confusion.weighted_f1(),
        accuracy: confusion.accuracy(),
        num_utterances: gold.len(),
        class_names: model.shape.class_names.clone(),
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Modalities,
    Layers,
    Speaker,
    Fusion,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Modalities => "modalities",
            AblationAxis::Layers => "layers",
            AblationAxis::Speaker => "speaker",
            AblationAxis::Fusion => "fusion",
        }
    }

    pub fn default_values(self) -> Vec<AxisValue> {
        match self {
            AblationAxis::Modalities => ["a", "v", "t", "at", "vt", "avt"]
                .iter()
                .map(|s| AxisValue::Modalities(s.parse().expect("valid mask")))
                .collect(),
            AblationAxis::Layers => [1, 2, 4, 8, 16, 32].into_iter().map(AxisValue::Layers).collect(),
            AblationAxis::Speaker => vec![AxisValue::Speaker(true), AxisValue::Speaker(false)],
            AblationAxis::Fusion => FusionKind::ALL.into_iter().map(AxisValue::Fusion).collect(),
        }
    }

    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let s = s.trim();
        match self {
            AblationAxis::Modalities => Ok(AxisValue::Modalities(s.parse()?)),
            AblationAxis::Layers => s
                .parse::<usize>()
                .ok()
                .filter(|&l| l > 0)
                .map(AxisValue::Layers)
                .ok_or_else(|| Error::InvalidArgument(format!("invalid layer count {s:?}"))),
            AblationAxis::Speaker => match s {
                "with" | "on" | "true" => Ok(AxisValue::Speaker(true)),
                "without" | "off" | "false" => Ok(AxisValue::Speaker(false)),
                _ => Err(Error::InvalidArgument(format!(
                    "invalid speaker setting {s:?}; expected with or without"
                ))),
            },
            AblationAxis::Fusion => Ok(AxisValue::Fusion(s.parse()?)),
        }
    }

    /// Parses a comma-separated value list.
    pub fn parse_values(self, list: &str) -> Result<Vec<AxisValue>> {
        list.split(',').map(|v| self.parse_value(v)).collect()
    }

    /// The base config's own value on this axis.
    fn value_of(self, cfg: &RunConfig) -> AxisValue {
        match self {
            AblationAxis::Modalities => AxisValue::Modalities(cfg.modalities),
            AblationAxis::Layers => AxisValue::Layers(cfg.num_layers),
            AblationAxis::Speaker => AxisValue::Speaker(cfg.speaker_embedding),
            AblationAxis::Fusion => AxisValue::Fusion(cfg.fusion),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modalities" | "modality" => Ok(AblationAxis::Modalities),
            "layers" => Ok(AblationAxis::Layers),
            "speaker" => Ok(AblationAxis::Speaker),
            "fusion" => Ok(AblationAxis::Fusion),
            _ => Err(Error::InvalidArgument(format!(
                "unknown axis {s:?}; expected modalities, layers, speaker or fusion"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisValue {
    Modalities(ModalityMask),
    Layers(usize),
    Speaker(bool),
    Fusion(FusionKind),
}

impl AxisValue {
    pub fn axis(self) -> AblationAxis {
        match self {
            AxisValue::Modalities(_) => AblationAxis::Modalities,
            AxisValue::Layers(_) => AblationAxis::Layers,
            AxisValue::Speaker(_) => AblationAxis::Speaker,
            AxisValue::Fusion(_) => AblationAxis::Fusion,
        }
    }

    pub fn label(self) -> String {
        match self {
            AxisValue::Modalities(m) => m.to_string(),
            AxisValue::Layers(l) => l.to_string(),
            AxisValue::Speaker(true) => "with".into(),
            AxisValue::Speaker(false) => "without".into(),
            AxisValue::Fusion(f) => f.to_string(),
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            AxisValue::Modalities(m) => cfg.modalities = m,
            AxisValue::Layers(l) => cfg.num_layers = l,
            AxisValue::Speaker(s) => cfg.speaker_embedding = s,
            AxisValue::Fusion(f) => {
                cfg.fusion = f;
                // The gated variant is defined over all three modality pairs.
                if f == FusionKind::Gated {
                    cfg.modalities = ModalityMask::ALL;
                }
            }
        }
    }
}

/// One axis, its values, the shared base config and the seed list.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<AxisValue>,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

impl AblationGrid {
    pub fn new(axis: AblationAxis, base: RunConfig) -> Self {
        Self {
            axis,
            values: axis.default_values(),
            base,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.values.is_empty() {
            p.push("ablation grid has no values".to_string());
        }
        if self.seeds.is_empty() {
            p.push("ablation grid has no seeds".to_string());
        }
        if let Some(v) = self.values.iter().find(|v| v.axis() != self.axis) {
            p.push(format!("value {} does not belong to axis {}", v.label(), self.axis));
        }
        for (i, v) in self.values.iter().enumerate() {
            if self.values[..i].contains(v) {
                p.push(format!("value {} listed twice", v.label()));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// The cell other cells are tested against: the base config's value when
    /// the grid contains it, otherwise the first value.
    pub fn reference(&self) -> AxisValue {
        let own = self.axis.value_of(&self.base);
        if self.values.contains(&own) {
            own
        } else {
            self.values[0]
        }
    }

    pub fn cell_config(&self, value: AxisValue, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        value.apply(&mut cfg);
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub mean_f1: Option<f64>,
    pub per_seed_f1: Vec<f64>,
    pub p_vs_reference: Option<f64>,
    pub t_test: Option<TTest>,
    /// Set when any seed of this cell failed; the other fields are then empty.
    pub error: Option<String>,
    #[serde(skip)]
    pub runs: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub reference: String,
    pub seeds: Vec<u64>,
    pub base_config: RunConfig,
    pub cells: Vec<CellReport>,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// `{axis, reference, seeds, order, cells: {label: {mean_f1, per_seed_f1, p_vs_reference}}}`
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Cell<'a> {
            mean_f1: Option<f64>,
            per_seed_f1: &'a [f64],
            p_vs_reference: Option<f64>,
            t: Option<f64>,
            error: Option<&'a str>,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            axis: AblationAxis,
            reference: &'a str,
            seeds: &'a [u64],
            order: Vec<&'a str>,
            base_config: &'a RunConfig,
            cells: BTreeMap<&'a str, Cell<'a>>,
        }
        let out = Out {
            axis: self.axis,
            reference: &self.reference,
            seeds: &self.seeds,
            order: self.cells.iter().map(|c| c.label.as_str()).collect(),
            base_config: &self.base_config,
            cells: self
                .cells
                .iter()
                .map(|c| {
                    (
                        c.label.as_str(),
                        Cell {
                            mean_f1: c.mean_f1,
                            per_seed_f1: &c.per_seed_f1,
                            p_vs_reference: c.p_vs_reference,
                            t: c.t_test.and_then(|t| t.t),
                            error: c.error.as_deref(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>9} {:>9}  per-seed weighted F1",
            self.axis.name(),
            "mean F1",
            "p vs ref"
        );
        for c in &self.cells {
            let mark = if c.label == self.reference { "*" } else { "" };
            let label = format!("{}{mark}", c.label);
            match &c.error {
                Some(e) => {
                    let _ = writeln!(s, "{label:<10} failed: {e}");
                }
                None => {
                    let mean = c.mean_f1.map_or("-".into(), |m| format!("{m:.4}"));
                    let p = c.p_vs_reference.map_or("-".into(), |p| format!("{p:.4}"));
                    let seeds: Vec<String> = c.per_seed_f1.iter().map(|f| format!("{f:.4}")).collect();
                    let _ = writeln!(s, "{label:<10} {mean:>9} {p:>9}  {}", seeds.join(" "));
                }
            }
        }
        let _ = writeln!(s, "* reference cell; p from a two-sided paired t-test over seeds");
        s
    }
}

/// Trains every cell once per seed on `train_set`, scores each run by
/// weighted F1 on `test_set`, and tests every cell against the reference.
/// Cells run one after another; a failing cell is recorded, not fatal.
pub fn run_ablation(
    train_set: &Corpus,
    test_set: &Corpus,
    grid: &AblationGrid,
    mut progress: impl FnMut(&str, u64, Option<f64>),
) -> Result<AblationReport> {
    grid.validate()?;
    let reference = grid.reference();
    let mut cells = Vec::new();
    for &value in &grid.values {
        let label = value.label();
        let mut scores = Vec::new();
        let mut runs = Vec::new();
        let mut error = None;
        for &seed in &grid.seeds {
            let cfg = grid.cell_config(value, seed);
            let outcome = train(train_set, &cfg)
                .and_then(|(model, report)| Ok((evaluate(&model, test_set)?, report)));
            match outcome {
                Ok((eval, report)) => {
                    progress(&label, seed, Some(eval.weighted_f1));
                    scores.push(eval.weighted_f1);
                    runs.push(report);
                }
                Err(e) => {
                    progress(&label, seed, None);
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let failed = error.is_some();
        cells.push(CellReport {
            label,
            mean_f1: (!failed).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            per_seed_f1: if failed { Vec::new() } else { scores },
            p_vs_reference: None,
            t_test: None,
            error,
            runs,
        });
    }
    let ref_label = reference.label();
    let ref_scores = cells
        .iter()
        .find(|c| c.label == ref_label)
        .filter(|c| c.error.is_none())
        .map(|c| c.per_seed_f1.clone());
    if let Some(ref_scores) = ref_scores {
        if ref_scores.len() >= 2 {
            for c in cells.iter_mut().filter(|c| c.label != ref_label && c.error.is_none()) {
                let t = paired_t_test(&c.per_seed_f1, &ref_scores)?;
                c.p_vs_reference = Some(t.p_value);
                c.t_test = Some(t);
            }
        }
    }
    Ok(AblationReport {
        axis: grid.axis,
        reference: ref_label,
        seeds: grid.seeds.clone(),
        base_config: grid.base.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_corpus, synthesize_corpus, FeatureDims, SynthSpec};

    #[test]
    fn axis_values() {
        let labels = |a: AblationAxis| a.default_values().iter().map(|v| v.label()).collect::<Vec<_>>();
        assert_eq!(labels(AblationAxis::Modalities), ["a", "v", "t", "at", "vt", "avt"]);
        assert_eq!(labels(AblationAxis::Layers), ["1", "2", "4", "8", "16", "32"]);
        assert_eq!(labels(AblationAxis::Speaker), ["with", "without"]);
        assert_eq!(labels(AblationAxis::Fusion), ["mmgcn", "early", "late", "gated"]);
        assert_eq!(
            AblationAxis::Layers.parse_values("1,2, 4").unwrap(),
            vec![AxisValue::Layers(1), AxisValue::Layers(2), AxisValue::Layers(4)]
        );
        assert!(AblationAxis::Layers.parse_values("1,0").is_err());
        assert!(AblationAxis::Speaker.parse_values("maybe").is_err());
        assert_eq!("layers".parse::<AblationAxis>().unwrap(), AblationAxis::Layers);
    }

    #[test]
    fn reference_cell_and_validation() {
        let grid = AblationGrid::new(AblationAxis::Layers, RunConfig::default());
        assert_eq!(grid.reference(), AxisValue::Layers(4));
        let mut g = grid.clone();
        g.values = vec![AxisValue::Layers(2), AxisValue::Layers(8)];
        assert_eq!(g.reference(), AxisValue::Layers(2));
        g.values.push(AxisValue::Layers(2));
        assert!(g.validate().is_err());
        g.values = vec![AxisValue::Speaker(true)];
        assert!(g.validate().is_err());
        let cfg = grid.cell_config(AxisValue::Layers(16), 3);
        assert_eq!((cfg.num_layers, cfg.seed), (16, 3));
    }

    #[test]
    fn small_grid_runs() {
        let corpus = synthesize_corpus(&SynthSpec {
            num_dialogues: 6,
            len_range: (3, 4),
            num_classes: 3,
            dims: FeatureDims { a: 3, v: 2, t: 4 },
            ..SynthSpec::default()
        })
        .unwrap();
        let (train_set, test_set) = split_corpus(&corpus, 0.5, 1).unwrap();
        let base = RunConfig {
            d_h: 4,
            d_s: 2,
            epochs: 2,
            val_fraction: 0.0,
            ..RunConfig::default()
        };
        let mut grid = AblationGrid::new(AblationAxis::Speaker, base);
        grid.seeds = vec![0, 1, 2];
        let mut calls = 0;
        let report = run_ablation(&train_set, &test_set, &grid, |_, _, _| calls += 1).unwrap();
        assert_eq!(calls, 6);
        assert_eq!(report.cells.len(), 2);
        assert_eq!(report.reference, "with");
        let without = report.cell("without").unwrap();
        assert_eq!(without.per_seed_f1.len(), 3);
        assert!(without.p_vs_reference.is_some());
        assert!(report.cell("with").unwrap().p_vs_reference.is_none());
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert!(json["cells"]["without"]["mean_f1"].is_number());
        assert!(report.to_table().contains("without"));

        // Failures are recorded per cell.
        let mut bad = grid.clone();
        bad.base.d_h = 3;
        let report = run_ablation(&train_set, &test_set, &bad, |_, _, _| {}).unwrap();
        assert!(report.cells.iter().all(|c| c.error.is_some()));
    }
}
